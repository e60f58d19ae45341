use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneError, BackboneSpec};
use crate::numerics::io::{read_bundle, write_bundle};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    spec: BackboneSpec,
    fingerprint: String,
}

/// Weights plus a JSON header carrying the `BackboneSpec` and fingerprint.
pub fn save_checkpoint(path: &Path, backbone: &Backbone) -> Result<(), BackboneError> {
    let meta = Meta { spec: backbone.spec().clone(), fingerprint: backbone.fingerprint_hex() };
    Ok(write_bundle(path, &meta, backbone.weights())?)
}

/// Load and check that the recomputed fingerprint matches the header.
pub fn load_checkpoint(path: &Path) -> Result<Backbone, BackboneError> {
    let (meta, weights): (Meta, _) = read_bundle(path)?;
    let b = Backbone::from_parts(meta.spec, weights)?;
    if b.fingerprint_hex() != meta.fingerprint {
        return Err(BackboneError::Checkpoint(format!(
            "fingerprint mismatch: header {} vs weights {}",
            meta.fingerprint,
            b.fingerprint_hex()
        )));
    }
    Ok(b)
}
