//! Line-delimited JSON sample files: one [`Sample`] object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::sample::Sample;
use crate::error::{Error, Result};

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)
            .map_err(|e| Error::format("sample file", e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| {
            Error::format("sample file", format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_object_per_line() {
        let s = Sample {
            user_id: 3,
            day: 1,
            scenario_id: 0,
            ad_id: 9,
            category_id: 2,
            ad_image: 9,
            behavior_items: vec![4, 5],
            behavior_images: vec![4, 5],
            label: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        write_samples(&p, &[s.clone(), s.clone()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"user_id":3,"day":1,"scenario_id":0,"ad_id":9,"category_id":2,"ad_image":9,"behavior_items":[4,5],"behavior_images":[4,5],"label":1}"#
        );
        assert_eq!(read_samples(&p).unwrap(), vec![s.clone(), s]);
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"user_id\":1}\n").unwrap();
        let err = read_samples(&p).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}
