use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{BehaviorClass, BehaviorTaxonomy, Dataset, Instance};
use crate::error::{Error, Result};

fn read_instances(path: &Path, frame_rate_hz: f64) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let inst: Instance = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        inst.validate().map_err(|e| parse_err(e.to_string()))?;
        if (inst.frame_rate_hz - frame_rate_hz).abs() > 1e-9 * frame_rate_hz.abs().max(1.0) {
            return Err(parse_err(format!(
                "instance {}: frame_rate_hz {} differs from expected {frame_rate_hz}",
                inst.instance_id, inst.frame_rate_hz
            )));
        }
        instances.push(inst);
    }
    Ok(instances)
}

/// Loads a JSONL dataset, inferring the taxonomy from the labels present
/// (sorted, each label doubling as its own description).
pub fn load_dataset(path: impl AsRef<Path>, frame_rate_hz: f64) -> Result<Dataset> {
    let instances = read_instances(path.as_ref(), frame_rate_hz)?;
    let mut labels: Vec<&str> = instances.iter().map(|i| i.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let taxonomy = BehaviorTaxonomy::new(
        labels
            .into_iter()
            .map(|l| BehaviorClass {
                label: l.to_string(),
                description: l.to_string(),
            })
            .collect(),
    )?;
    Dataset::new(instances, taxonomy)
}

/// Loads a JSONL dataset and checks every label against `taxonomy`.
pub fn load_dataset_with_taxonomy(
    path: impl AsRef<Path>,
    frame_rate_hz: f64,
    taxonomy: BehaviorTaxonomy,
) -> Result<Dataset> {
    let instances = read_instances(path.as_ref(), frame_rate_hz)?;
    Dataset::new(instances, taxonomy)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in &dataset.instances {
        let line = serde_json::to_string(inst).map_err(|e| Error::json("serializing instance", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<BehaviorTaxonomy> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let taxonomy: BehaviorTaxonomy =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    taxonomy.validate()?;
    Ok(taxonomy)
}

pub fn save_taxonomy(taxonomy: &BehaviorTaxonomy, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text =
        serde_json::to_string_pretty(taxonomy).map_err(|e| Error::json("serializing taxonomy", e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIVE_FRAMES: &str = r#"{"instance_id":"a","frame_rate_hz":10,"ttb_frames":10,"label":"stop","frames":[
{"t":0,"target_uid":1,"agents":[{"uid":1,"class":"car","x":0,"y":0,"z":0,"orientation":0},{"uid":2,"class":"pedestrian","x":5,"y":1,"z":0,"orientation":1.5}]},
{"t":1,"target_uid":1,"agents":[{"uid":1,"class":"car","x":1,"y":0,"z":0,"orientation":0},{"uid":2,"class":"pedestrian","x":5,"y":1.1,"z":0,"orientation":1.5}]},
{"t":2,"target_uid":1,"agents":[{"uid":1,"class":"car","x":2,"y":0,"z":0,"orientation":0},{"uid":2,"class":"pedestrian","x":5,"y":1.2,"z":0,"orientation":1.5}]},
{"t":3,"target_uid":1,"agents":[{"uid":1,"class":"car","x":3,"y":0,"z":0,"orientation":0},{"uid":2,"class":"pedestrian","x":5,"y":1.3,"z":0,"orientation":1.5}]},
{"t":4,"target_uid":1,"agents":[{"uid":1,"class":"car","x":4,"y":0,"z":0,"orientation":0},{"uid":2,"class":"pedestrian","x":5,"y":1.4,"z":0,"orientation":1.5}]}]}"#;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    fn stop_go() -> BehaviorTaxonomy {
        BehaviorTaxonomy::new(vec![
            BehaviorClass {
                label: "stop".into(),
                description: "the vehicle comes to a halt".into(),
            },
            BehaviorClass {
                label: "go".into(),
                description: "the vehicle keeps moving".into(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn loads_single_line_instance() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "d.jsonl", &format!("{}\n", FIVE_FRAMES.replace('\n', "")));
        let ds = load_dataset_with_taxonomy(&path, 10.0, stop_go()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.instances[0].len(), 5);
        assert_eq!(ds.instances[0].frames[0].agents.len(), 2);
        assert_eq!(ds.uniform_len().unwrap(), 5);
    }

    #[test]
    fn inferred_taxonomy_is_sorted_label_set() {
        let dir = tempfile::tempdir().unwrap();
        let line = FIVE_FRAMES.replace('\n', "");
        let second = line.replace("\"a\"", "\"b\"").replace("stop", "go");
        let path = write(&dir, "d.jsonl", &format!("{line}\n{second}\n"));
        let ds = load_dataset(&path, 10.0).unwrap();
        assert_eq!(ds.taxonomy.labels().collect::<Vec<_>>(), vec!["go", "stop"]);

        let single = write(&dir, "s.jsonl", &format!("{line}\n"));
        assert!(load_dataset(&single, 10.0).is_err());
    }

    #[test]
    fn unknown_label_is_rejected_against_taxonomy() {
        let dir = tempfile::tempdir().unwrap();
        let line = FIVE_FRAMES.replace('\n', "").replace("stop", "reverse");
        let path = write(&dir, "d.jsonl", &line);
        let err = load_dataset_with_taxonomy(&path, 10.0, stop_go()).unwrap_err();
        assert!(err.to_string().contains("reverse"));
    }

    #[test]
    fn missing_target_reports_instance_and_frame() {
        let dir = tempfile::tempdir().unwrap();
        let line = FIVE_FRAMES
            .replace('\n', "")
            .replacen("{\"t\":2,\"target_uid\":1", "{\"t\":2,\"target_uid\":9", 1);
        let path = write(&dir, "d.jsonl", &format!("{line}\n"));
        let err = load_dataset(&path, 10.0).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        assert!(err.contains("instance a"), "{err}");
        assert!(err.contains("frame 2"), "{err}");
    }

    #[test]
    fn malformed_line_is_line_numbered() {
        let dir = tempfile::tempdir().unwrap();
        let line = FIVE_FRAMES.replace('\n', "");
        let path = write(&dir, "d.jsonl", &format!("{line}\n{{not json\n"));
        let err = load_dataset(&path, 10.0).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_dataset("/nonexistent/data.jsonl", 10.0).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn frame_rate_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "d.jsonl", &FIVE_FRAMES.replace('\n', ""));
        assert!(load_dataset(&path, 5.0).is_err());
    }
}
