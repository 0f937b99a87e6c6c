//! Loading analysis input from either results format.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use joulemeter::analysis::Observation;
use joulemeter::harness::{parse_log, read_csv};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    RecordLog,
    Csv,
}

/// Read observations from a JSON-lines record log or a CSV export, telling
/// them apart by the first non-blank byte.
pub fn load_observations(path: &Path) -> Result<(Vec<Observation>, InputKind), CliError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| CliError::config("input", format!("{}: {e}", path.display())))?;
    let bad = |e: joulemeter::harness::HarnessError| CliError::config("input", format!("{}: {e}", path.display()));
    if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
        let records = parse_log(bytes.as_slice()).map_err(bad)?;
        Ok((records.iter().map(Observation::from).collect(), InputKind::RecordLog))
    } else {
        let rows = read_csv(bytes.as_slice()).map_err(bad)?;
        Ok((rows.iter().map(Observation::from).collect(), InputKind::Csv))
    }
}
