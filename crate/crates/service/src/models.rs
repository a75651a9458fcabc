use std::collections::BTreeMap;
use std::path::Path;

use i2e_core::dataset::{flatten_window, Window, FLAT_LEN};
use i2e_core::forecasters::{load_weights, save_weights, Backbone};
use i2e_core::gbt::Objective;
use i2e_core::{Error, Forecaster, GbtModel, MinMaxScaler, Result, Task};
use sha2::{Digest, Sha256};

pub const TRANSFORMER_FILE: &str = "transformer_regression.i2ew";
pub const LSTM_FILE: &str = "lstm_regression.i2ew";
pub const GBT_FILE: &str = "gbt_regression.json";
pub const SCALER_FILE: &str = "scaler.json";

/// The three regression models behind the ensemble plus the training scaler.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub transformer: Forecaster,
    pub lstm: Forecaster,
    /// Trained on flattened scaled windows against the scaled target.
    pub gbt: GbtModel,
    pub scaler: MinMaxScaler,
}

impl ModelBundle {
    pub fn new(transformer: Forecaster, lstm: Forecaster, gbt: GbtModel, scaler: MinMaxScaler) -> Result<Self> {
        let b = Self { transformer, lstm, gbt, scaler };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let t = self.transformer.config();
        if t.backbone != Backbone::Transformer || t.task != Task::Regression {
            return bad("transformer member must be a transformer regression model");
        }
        let l = self.lstm.config();
        if l.backbone != Backbone::Lstm || l.task != Task::Regression {
            return bad("lstm member must be an LSTM regression model");
        }
        if self.gbt.params.objective != Objective::Squared || self.gbt.n_features != FLAT_LEN {
            return bad("gbt member must be a squared-loss model over flattened windows");
        }
        if !self.scaler.is_fitted() {
            return bad("scaler is not fitted");
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let net = |f: &str| Forecaster::from_weights(&load_weights(&dir.join(f))?);
        let scaler_path = dir.join(SCALER_FILE);
        let text = std::fs::read_to_string(&scaler_path)
            .map_err(|e| Error::Io { path: scaler_path.clone(), source: e })?;
        let scaler = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", scaler_path.display())))?;
        Self::new(net(TRANSFORMER_FILE)?, net(LSTM_FILE)?, GbtModel::load(&dir.join(GBT_FILE))?, scaler)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_weights(&dir.join(TRANSFORMER_FILE), &self.transformer.to_weights())?;
        save_weights(&dir.join(LSTM_FILE), &self.lstm.to_weights())?;
        self.gbt.save(&dir.join(GBT_FILE))?;
        let path = dir.join(SCALER_FILE);
        let json = serde_json::to_string_pretty(&self.scaler).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })
    }

    /// Raw-space returns `(transformer, lstm, gbt)` for unscaled windows.
    pub fn predict(&self, windows: &[Window]) -> Result<Vec<[f64; 3]>> {
        let scaled = windows.iter().map(|w| self.scaler.transform_window(w)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Window> = scaled.iter().collect();
        let t = self.transformer.raw_outputs(&refs)?;
        let l = self.lstm.raw_outputs(&refs)?;
        let flat: Vec<Vec<f64>> = scaled.iter().map(|w| flatten_window(w).to_vec()).collect();
        let g = self.gbt.predict(&flat)?;
        (0..windows.len())
            .map(|i| {
                Ok([
                    self.scaler.inverse_target(t[i])?,
                    self.scaler.inverse_target(l[i])?,
                    self.scaler.inverse_target(g[i])?,
                ])
            })
            .collect()
    }

    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        let sha = |b: &[u8]| hex::encode(Sha256::digest(b));
        let scaler = serde_json::to_vec(&self.scaler).map_err(|e| Error::Format(e.to_string()))?;
        Ok(BTreeMap::from([
            ("transformer".to_string(), self.transformer.to_weights().content_digest()?),
            ("lstm".to_string(), self.lstm.to_weights().content_digest()?),
            ("gbt".to_string(), sha(self.gbt.to_json()?.as_bytes())),
            ("scaler".to_string(), sha(&scaler)),
        ]))
    }
}
