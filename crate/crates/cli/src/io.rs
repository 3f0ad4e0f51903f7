//! Output formatting and atomic file writing.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Floating-point text formatting used by every emitted file: 17
/// significant digits, which round-trips f64 exactly.
pub fn fmt_f(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{:.16e}", x)
    }
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    let mut name = path
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// CSV emitter with a fixed header; floats go through [`fmt_f`].
pub struct Csv {
    buf: String,
    cols: usize,
}

impl Csv {
    pub fn new(header: &str) -> Self {
        let cols = header.split(',').count();
        Csv {
            buf: format!("{header}\n"),
            cols,
        }
    }

    pub fn row(&mut self, fields: &[CsvField]) {
        assert_eq!(fields.len(), self.cols, "row width mismatch");
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            first = false;
            match f {
                CsvField::F(x) => self.buf.push_str(&fmt_f(*x)),
                CsvField::S(s) => self.buf.push_str(s),
            }
        }
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

pub enum CsvField {
    F(f64),
    S(String),
}

/// Minimal flat JSON object emitter; floats go through [`fmt_f`] so output
/// is reproducible byte for byte.
pub struct Json {
    parts: Vec<String>,
}

impl Json {
    pub fn new() -> Self {
        Json { parts: Vec::new() }
    }

    pub fn f(&mut self, key: &str, x: f64) -> &mut Self {
        self.parts.push(format!("\"{key}\": {}", fmt_f(x)));
        self
    }

    pub fn f_opt(&mut self, key: &str, x: Option<f64>) -> &mut Self {
        match x {
            Some(v) => self.f(key, v),
            None => {
                self.parts.push(format!("\"{key}\": null"));
                self
            }
        }
    }

    pub fn s(&mut self, key: &str, v: &str) -> &mut Self {
        self.parts.push(format!("\"{key}\": \"{v}\""));
        self
    }

    pub fn u(&mut self, key: &str, v: u64) -> &mut Self {
        self.parts.push(format!("\"{key}\": {v}"));
        self
    }

    pub fn b(&mut self, key: &str, v: bool) -> &mut Self {
        self.parts.push(format!("\"{key}\": {v}"));
        self
    }

    pub fn finish(&self) -> String {
        format!("{{\n  {}\n}}\n", self.parts.join(",\n  "))
    }
}
