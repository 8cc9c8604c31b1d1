//! Genotype file format: versioned JSON with one record per selection.
//!
//! Op names are exactly the seven enumeration names; unknown names or
//! fields are rejected by the parser.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellGenotype, CellKind, NetworkGenotype, Selection};
use crate::error::{Error, Result};

pub const GENOTYPE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    version: u32,
    normal: Vec<Selection>,
    reduction: Vec<Selection>,
}

pub fn genotype_to_string(g: &NetworkGenotype) -> String {
    let file = GenotypeFile {
        version: GENOTYPE_FORMAT_VERSION,
        normal: g.normal.selections.clone(),
        reduction: g.reduction.selections.clone(),
    };
    serde_json::to_string_pretty(&file).expect("genotype serializes")
}

pub fn genotype_from_str(text: &str) -> Result<NetworkGenotype> {
    let file: GenotypeFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        file: "<genotype>".to_string(),
        message: e.to_string(),
    })?;
    if file.version != GENOTYPE_FORMAT_VERSION {
        return Err(Error::Parse {
            file: "<genotype>".to_string(),
            message: format!("unsupported genotype version {} (expected {GENOTYPE_FORMAT_VERSION})", file.version),
        });
    }
    Ok(NetworkGenotype {
        normal: CellGenotype { kind: CellKind::Normal, selections: file.normal },
        reduction: CellGenotype { kind: CellKind::Reduction, selections: file.reduction },
    })
}

pub fn write_genotype(path: &Path, g: &NetworkGenotype) -> Result<()> {
    fs::write(path, genotype_to_string(g) + "\n")?;
    Ok(())
}

pub fn read_genotype(path: &Path) -> Result<NetworkGenotype> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    genotype_from_str(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse { file: path.display().to_string(), message },
        other => other,
    })
}
