use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::DataError;

/// Streaming JSON Lines reader. Blank lines are skipped; errors carry the
/// 1-based line number.
pub struct JsonlReader<T> {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    _t: PhantomData<T>,
}

impl<T: DeserializeOwned> Iterator for JsonlReader<T> {
    type Item = Result<(usize, T), DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(DataError::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                serde_json::from_str(&line)
                    .map(|v| (self.line_no, v))
                    .map_err(|e| DataError::format(&self.path, self.line_no, e.to_string())),
            );
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<JsonlReader<T>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    Ok(JsonlReader { path: path.to_path_buf(), lines: BufReader::new(file).lines(), line_no: 0, _t: PhantomData })
}

/// Writes `items` as JSON Lines through a temporary file renamed into place,
/// so a partially written file never appears at `path`. Returns the count.
pub fn write_jsonl<T, I, E>(path: &Path, items: I) -> Result<usize, E>
where
    T: Serialize,
    I: IntoIterator<Item = Result<T, E>>,
    E: From<DataError>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    let file = File::create(&tmp).map_err(|e| DataError::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for item in items {
        let item = item?;
        serde_json::to_writer(&mut w, &item).map_err(|e| DataError::io(&tmp, e.into()))?;
        w.write_all(b"\n").map_err(|e| DataError::io(&tmp, e))?;
        n += 1;
    }
    w.flush().map_err(|e| DataError::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))?;
    Ok(n)
}
