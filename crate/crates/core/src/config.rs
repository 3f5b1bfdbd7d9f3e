//! Parameter files for the three models and the shipped defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::bucket::BucketParams;
use crate::ecm::{EcmParams, SchmalstiegParams};
use crate::error::{Error, Result};
use crate::model::{BatteryModel, EcmModel, ModelKind};
use crate::spm::{Spm, SpmParams};
use crate::table::{MonotoneCubic, Table1d};

/// Directory holding the shipped parameter and OCV files.
pub fn default_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn load_bucket(path: impl AsRef<Path>) -> Result<BucketParams> {
    let p: BucketParams = read_toml(path.as_ref())?;
    p.validate()?;
    Ok(p)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EcmFile {
    e_ah: f64,
    r_s: f64,
    r_p: f64,
    c_p: f64,
    ocv_file: PathBuf,
    v_min: f64,
    v_max: f64,
    n_cells: f64,
    lambda_degr_ah: f64,
    temperature_k: f64,
    degradation: SchmalstiegParams,
}

/// ECM parameters and degradation coefficients; the OCV path is relative to the file.
pub fn load_ecm(path: impl AsRef<Path>) -> Result<EcmModel> {
    let path = path.as_ref();
    let f: EcmFile = read_toml(path)?;
    let ocv_path = if f.ocv_file.is_absolute() {
        f.ocv_file.clone()
    } else {
        path.parent().unwrap_or(Path::new(".")).join(&f.ocv_file)
    };
    let params = EcmParams {
        e_ah: f.e_ah,
        r_s: f.r_s,
        r_p: f.r_p,
        c_p: f.c_p,
        ocv: MonotoneCubic::new(Table1d::load_csv(&ocv_path, "soc", "ocv_v")?),
        v_min: f.v_min,
        v_max: f.v_max,
        n_cells: f.n_cells,
        lambda_degr_ah: f.lambda_degr_ah,
        temperature_k: f.temperature_k,
    };
    params.validate()?;
    f.degradation.validate()?;
    Ok(EcmModel {
        params,
        degradation: f.degradation,
    })
}

/// Loads a model from `path`, or from the shipped defaults when `path` is `None`.
pub fn load_model(kind: ModelKind, path: Option<&Path>) -> Result<BatteryModel> {
    let default = default_data_dir().join(format!("{}.toml", kind.name()));
    let path = path.unwrap_or(&default);
    Ok(match kind {
        ModelKind::Bucket => BatteryModel::Bucket(load_bucket(path)?),
        ModelKind::Ecm => BatteryModel::Ecm(load_ecm(path)?),
        ModelKind::Spm => BatteryModel::Spm(Spm::new(SpmParams::load(path)?)?),
    })
}

/// The single-particle oracle with shipped parameters.
pub fn default_spm() -> Result<Spm> {
    Spm::new(SpmParams::load(default_data_dir().join("spm.toml"))?)
}
