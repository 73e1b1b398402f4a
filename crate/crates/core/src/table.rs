//! Rectangular result tables and their CSV form.
//!
//! CSV conventions: a `#` provenance line (config hash, tool version), then a
//! mandatory header row, then rows with '.' decimal separator and 17
//! significant digits so doubles round-trip exactly. Row order is
//! deterministic, so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(&'static str),
}

impl Cell {
    fn render(&self, out: &mut String) {
        match self {
            // 17 significant digits: 1 leading + 16 after the point.
            Cell::Num(x) => write!(out, "{x:.16e}").unwrap(),
            Cell::Int(i) => write!(out, "{i}").unwrap(),
            Cell::Text(s) => out.push_str(s),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResultTable {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
    /// Provenance: config hash and tool version.
    pub config_hash: String,
}

impl ResultTable {
    pub fn new(columns: Vec<&'static str>, config_hash: &str) -> ResultTable {
        ResultTable {
            columns,
            rows: Vec::new(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# config={} version={}",
            self.config_hash,
            env!("CARGO_PKG_VERSION")
        )
        .unwrap();
        writeln!(out, "{}", self.columns.join(",")).unwrap();
        for row in &self.rows {
            let mut first = true;
            for cell in row {
                if !first {
                    out.push(',');
                }
                first = false;
                cell.render(&mut out);
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
