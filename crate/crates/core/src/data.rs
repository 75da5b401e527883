//! The observational dataset `(Y, W, X)` and its CSV representation.
//!
//! CSV schema: header `Y,W,X1,..,Xp`, optionally followed by the truth
//! columns `true_e0,true_m0,true_m1,true_cate` for simulated data.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const TRUTH_COLUMNS: [&str; 4] = ["true_e0", "true_m0", "true_m1", "true_cate"];

/// Analytic nuisance values attached to simulated rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub e0: Vec<f64>,
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    pub cate: Vec<f64>,
}

impl Truth {
    fn subset(&self, rows: &[usize]) -> Truth {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect();
        Truth {
            e0: pick(&self.e0),
            m0: pick(&self.m0),
            m1: pick(&self.m1),
            cate: pick(&self.cate),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub w: Vec<u8>,
    pub x: Array2<f64>,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, w: Vec<u8>, x: Array2<f64>) -> Result<Self> {
        let ds = Dataset {
            y,
            w,
            x,
            truth: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    /// Checks lengths, binary treatment, and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.w.len() != n || self.x.nrows() != n {
            return Err(Error::Schema(format!(
                "inconsistent lengths: Y {n}, W {}, X {}",
                self.w.len(),
                self.x.nrows()
            )));
        }
        if let Some(bad) = self.w.iter().find(|&&w| w > 1) {
            return Err(Error::Schema(format!("treatment value {bad} is not binary")));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Y".into()));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("X".into()));
        }
        if let Some(t) = &self.truth {
            if [&t.e0, &t.m0, &t.m1, &t.cate].iter().any(|c| c.len() != n) {
                return Err(Error::Schema("truth columns have wrong length".into()));
            }
        }
        Ok(())
    }

    /// Row ids belonging to arm `arm` in ascending order.
    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        self.w
            .iter()
            .enumerate()
            .filter_map(|(i, &w)| (w == arm).then_some(i))
            .collect()
    }

    pub fn arm_count(&self, arm: u8) -> usize {
        self.w.iter().filter(|&&w| w == arm).count()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.arm_count(1) as f64 / self.n() as f64
    }

    /// Rows `rows` in the given order (duplicates allowed).
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            w: rows.iter().map(|&i| self.w[i]).collect(),
            x: self.x.select(Axis(0), rows),
            truth: self.truth.as_ref().map(|t| t.subset(rows)),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W, with_truth: bool) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let p = self.p();
        let truth = if with_truth { self.truth.as_ref() } else { None };
        let mut header = vec!["Y".to_string(), "W".to_string()];
        header.extend((1..=p).map(|d| format!("X{d}")));
        if truth.is_some() {
            header.extend(TRUTH_COLUMNS.iter().map(|s| s.to_string()));
        }
        out.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            record.clear();
            record.push(self.y[i].to_string());
            record.push(self.w[i].to_string());
            record.extend(self.x.row(i).iter().map(|v| v.to_string()));
            if let Some(t) = truth {
                record.extend([t.e0[i], t.m0[i], t.m1[i], t.cate[i]].iter().map(|v| v.to_string()));
            }
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the `Y,W,X*` schema. Covariates are every column whose name is
    /// `X` followed by digits, in header order; `true_*` columns are loaded
    /// as truth when all four are present; anything else is a schema error.
    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let y_col = find("Y").ok_or_else(|| Error::Schema("missing column Y".into()))?;
        let w_col = find("W").ok_or_else(|| Error::Schema("missing column W".into()))?;
        let x_cols: Vec<usize> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| {
                let h = h.trim();
                h.len() > 1 && h.starts_with('X') && h[1..].chars().all(|c| c.is_ascii_digit())
            })
            .map(|(i, _)| i)
            .collect();
        if x_cols.is_empty() {
            return Err(Error::Schema("no covariate columns X1..Xp".into()));
        }
        let truth_cols: Vec<Option<usize>> = TRUTH_COLUMNS.iter().map(|c| find(c)).collect();
        for (i, h) in headers.iter().enumerate() {
            let h = h.trim();
            if i != y_col && i != w_col && !x_cols.contains(&i) && !TRUTH_COLUMNS.contains(&h) {
                return Err(Error::Schema(format!("unexpected column {h}")));
            }
        }
        let has_truth = truth_cols.iter().all(Option::is_some);

        let p = x_cols.len();
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut xs = Vec::new();
        let mut truth = vec![Vec::new(); 4];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |c: usize, name: &str| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("").trim();
                raw.parse::<f64>().map_err(|_| {
                    Error::Schema(format!("row {}: column {name}: cannot parse {raw:?}", line + 1))
                })
            };
            y.push(field(y_col, "Y")?);
            let wv = field(w_col, "W")?;
            if wv != 0.0 && wv != 1.0 {
                return Err(Error::Schema(format!(
                    "row {}: column W must be 0 or 1, got {wv}",
                    line + 1
                )));
            }
            w.push(wv as u8);
            for &c in &x_cols {
                xs.push(field(c, &headers[c])?);
            }
            if has_truth {
                for (k, c) in truth_cols.iter().enumerate() {
                    truth[k].push(field(c.unwrap(), TRUTH_COLUMNS[k])?);
                }
            }
        }
        let n = y.len();
        let x = Array2::from_shape_vec((n, p), xs)
            .map_err(|e| Error::Schema(format!("covariate block: {e}")))?;
        let truth = has_truth.then(|| {
            let mut it = truth.into_iter();
            Truth {
                e0: it.next().unwrap(),
                m0: it.next().unwrap(),
                m1: it.next().unwrap(),
                cate: it.next().unwrap(),
            }
        });
        let ds = Dataset { y, w, x, truth };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> Dataset {
        Dataset::new(
            vec![1.5, -0.25, 3.0],
            vec![1, 0, 1],
            array![[0.1, 2.0], [0.2, -1.0], [1e-17, 4.5]],
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = tiny();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, false).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("Y,W,X1,X2\n"));
        let back = Dataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_w_column_is_named() {
        let err = Dataset::read_csv("Y,X1\n1,2\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("missing column W"), "{err}");
    }

    #[test]
    fn non_binary_treatment_rejected() {
        let err = Dataset::read_csv("Y,W,X1\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn subset_keeps_order_and_duplicates() {
        let ds = tiny();
        let s = ds.subset(&[2, 0, 2]);
        assert_eq!(s.y, vec![3.0, 1.5, 3.0]);
        assert_eq!(s.x[[1, 1]], 2.0);
    }
}
