//! On-disk formats.
//!
//! Datasets are a long CSV (`subject_id, t, z, s_1..s_d, a, r`) plus a JSON
//! sidecar next to it carrying dimensions, the generating environment and,
//! for simulated data, the noise record. Floats in CSV are written with 17
//! significant digits so they parse back to the same bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cmdp::{CmdpSpec, Dataset, Trajectory};
use crate::error::{arg_err, Error, Result};
use crate::preprocess::{AugmentedTuple, Marginals, PreprocessedDataset};

/// Round-trip-exact decimal form of a float.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub state_dim: usize,
    pub action_count: usize,
    pub attribute_count: usize,
    pub horizon: usize,
    pub n_subjects: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<CmdpSpec>,
    /// `noises[i][t]` = `(U^S_t, U^R_t)` for subject `i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noises: Option<Vec<Vec<Vec<f64>>>>,
}

/// Writes the CSV at `csv_path` and the sidecar at [`sidecar_path`].
pub fn write_dataset(data: &Dataset, env: Option<&CmdpSpec>, csv_path: &Path) -> Result<()> {
    let d = data.state_dim;
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["subject_id".to_string(), "t".into(), "z".into()];
    header.extend((1..=d).map(|j| format!("s_{j}")));
    header.extend(["a".to_string(), "r".into()]);
    w.write_record(&header)?;
    for (i, traj) in data.trajectories.iter().enumerate() {
        for t in 0..traj.horizon() {
            let mut row = vec![i.to_string(), (t + 1).to_string(), traj.z.to_string()];
            row.extend(traj.states[t].iter().map(|&x| fmt_f64(x)));
            row.push(traj.actions[t].to_string());
            row.push(fmt_f64(traj.rewards[t]));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let sidecar = DatasetSidecar {
        state_dim: d,
        action_count: data.action_count,
        attribute_count: data.attribute_count,
        horizon: data.horizon(),
        n_subjects: data.len(),
        env: env.cloned(),
        noises: data
            .has_noises()
            .then(|| data.trajectories.iter().map(|t| t.noises.clone().unwrap_or_default()).collect()),
    };
    write_json(&sidecar, &sidecar_path(csv_path))
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: u64) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Argument(format!("line {line}: cannot parse {what} from `{field}`")))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Argument(format!("missing column `{name}`")))
}

/// Reads a dataset CSV and its sidecar; returns the generating env if recorded.
pub fn read_dataset(csv_path: &Path) -> Result<(Dataset, Option<CmdpSpec>)> {
    let sidecar: DatasetSidecar = read_json(&sidecar_path(csv_path))?;
    let mut reader = csv::Reader::from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let d = sidecar.state_dim;
    let (c_id, c_t, c_z, c_a, c_r) =
        (column(&headers, "subject_id")?, column(&headers, "t")?, column(&headers, "z")?, column(&headers, "a")?, column(&headers, "r")?);
    let c_s = (1..=d).map(|j| column(&headers, &format!("s_{j}"))).collect::<Result<Vec<_>>>()?;

    let mut trajectories: Vec<Trajectory> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let id: usize = parse(&record[c_id], "subject_id", line)?;
        let t: usize = parse(&record[c_t], "t", line)?;
        if id == trajectories.len() {
            trajectories.push(Trajectory {
                z: parse(&record[c_z], "z", line)?,
                states: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                noises: None,
            });
        }
        if id + 1 != trajectories.len() {
            return arg_err(format!("line {line}: rows must be grouped by subject_id in increasing order"));
        }
        let traj = trajectories.last_mut().expect("pushed above");
        if t != traj.states.len() + 1 {
            return arg_err(format!("line {line}: expected t = {}, got {t}", traj.states.len() + 1));
        }
        if parse::<usize>(&record[c_z], "z", line)? != traj.z {
            return arg_err(format!("line {line}: attribute changes within subject {id}"));
        }
        traj.states.push(c_s.iter().map(|&c| parse(&record[c], "state", line)).collect::<Result<_>>()?);
        traj.actions.push(parse(&record[c_a], "a", line)?);
        traj.rewards.push(parse(&record[c_r], "r", line)?);
    }
    if let Some(noises) = sidecar.noises {
        if noises.len() != trajectories.len() {
            return arg_err("sidecar noise record does not match the number of subjects");
        }
        for (traj, n) in trajectories.iter_mut().zip(noises) {
            traj.noises = Some(n);
        }
    }
    let data = Dataset::new(d, sidecar.action_count, sidecar.attribute_count, trajectories)?;
    if data.len() != sidecar.n_subjects || data.horizon() != sidecar.horizon {
        return arg_err("CSV contents disagree with the sidecar's n_subjects/horizon");
    }
    Ok((data, sidecar.env))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedHeader {
    pub state_dim: usize,
    pub action_count: usize,
    pub attribute_count: usize,
    pub horizon: usize,
    pub n_subjects: usize,
    pub marginals: Marginals,
    pub mean_model: String,
}

/// Columns: `subject_id, t, z, a, r_tilde, s_tilde_{k}_{j}` (k, j one-based),
/// with a JSON header at [`sidecar_path`].
pub fn write_preprocessed(pre: &PreprocessedDataset, csv_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["subject_id".to_string(), "t".into(), "z".into(), "a".into(), "r_tilde".into()];
    for k in 1..=pre.attribute_count {
        header.extend((1..=pre.state_dim).map(|j| format!("s_tilde_{k}_{j}")));
    }
    w.write_record(&header)?;
    for tup in &pre.tuples {
        let mut row = vec![tup.subject_id.to_string(), tup.t.to_string(), tup.z.to_string(), tup.action.to_string(), fmt_f64(tup.aug_reward)];
        row.extend(tup.aug_state.iter().flatten().map(|&x| fmt_f64(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    let header = PreprocessedHeader {
        state_dim: pre.state_dim,
        action_count: pre.action_count,
        attribute_count: pre.attribute_count,
        horizon: pre.horizon,
        n_subjects: pre.tuples.len() / pre.horizon.max(1),
        marginals: pre.marginals.clone(),
        mean_model: pre.mean_model.clone(),
    };
    write_json(&header, &sidecar_path(csv_path))
}

pub fn read_preprocessed(csv_path: &Path) -> Result<PreprocessedDataset> {
    let header: PreprocessedHeader = read_json(&sidecar_path(csv_path))?;
    let (k, d) = (header.attribute_count, header.state_dim);
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut tuples: Vec<AugmentedTuple> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 5 + k * d {
            return arg_err(format!("line {line}: expected {} fields", 5 + k * d));
        }
        let flat = (5..record.len()).map(|c| parse(&record[c], "state", line)).collect::<Result<Vec<f64>>>()?;
        tuples.push(AugmentedTuple {
            subject_id: parse(&record[0], "subject_id", line)?,
            t: parse(&record[1], "t", line)?,
            z: parse(&record[2], "z", line)?,
            action: parse(&record[3], "a", line)?,
            aug_reward: parse(&record[4], "r_tilde", line)?,
            aug_state: flat.chunks(d).map(<[f64]>::to_vec).collect(),
            aug_next_state: None,
        });
    }
    let h = header.horizon;
    if h == 0 || tuples.len() != header.n_subjects * h {
        return arg_err("row count does not match the header's n_subjects * horizon");
    }
    for (idx, tup) in tuples.iter().enumerate() {
        if tup.subject_id != idx / h || tup.t != idx % h + 1 {
            return arg_err(format!("row {} out of order (subject {}, t {})", idx + 1, tup.subject_id, tup.t));
        }
    }
    // Next states are the following row of the same subject.
    for idx in 0..tuples.len() {
        if idx % h + 1 < h {
            tuples[idx].aug_next_state = Some(tuples[idx + 1].aug_state.clone());
        }
    }
    Ok(PreprocessedDataset {
        state_dim: d,
        action_count: header.action_count,
        attribute_count: k,
        horizon: h,
        tuples,
        marginals: header.marginals,
        mean_model: header.mean_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{linear_env, sample_dataset};
    use crate::preprocess::preprocess;

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let env = linear_env(1.0);
        let data = sample_dataset(&env, 20, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset(&data, Some(&env), &path).unwrap();
        let (back, env_back) = read_dataset(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(env_back, Some(env));

        write_dataset(&data.without_noises(), None, &path).unwrap();
        let (back, env_back) = read_dataset(&path).unwrap();
        assert_eq!(back, data.without_noises());
        assert_eq!(env_back, None);
    }

    #[test]
    fn preprocessed_round_trip_is_bit_exact() {
        let env = linear_env(1.0);
        let data = sample_dataset(&env, 10, 4, 5).unwrap();
        let pre = preprocess(&data, &env, &Marginals::exact(&env)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.csv");
        write_preprocessed(&pre, &path).unwrap();
        assert_eq!(read_preprocessed(&path).unwrap(), pre);
    }

    #[test]
    fn malformed_rows_are_argument_errors() {
        let env = linear_env(1.0);
        let data = sample_dataset(&env, 3, 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset(&data, None, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen(",1,", ",x,", 1)).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Argument(_))));
    }
}
