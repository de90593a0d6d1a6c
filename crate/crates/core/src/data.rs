//! Tabular hybrid-modeling data: CSV ingest, pseudo-sequential sorting,
//! cyclic sliding windows and pseudo-image construction.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const Y_TRUE: &str = "y_true";
pub const Y_ME: &str = "y_me";

/// Features plus actual and mechanistic outputs. The residual target
/// `y = y_true - y_me` is always derived, never read.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    y_true: Vec<f64>,
    y_me: Vec<f64>,
    y: Vec<f64>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        y_true: Vec<f64>,
        y_me: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let (m, n) = features.dims2()?;
        if y_true.len() != m {
            return Err(DataError::LengthMismatch {
                expected: m,
                got: y_true.len(),
            });
        }
        if y_me.len() != m {
            return Err(DataError::LengthMismatch {
                expected: m,
                got: y_me.len(),
            });
        }
        if feature_names.len() != n {
            return Err(DataError::LengthMismatch {
                expected: n,
                got: feature_names.len(),
            });
        }
        let y = y_true.iter().zip(&y_me).map(|(t, me)| t - me).collect();
        Ok(Self {
            features,
            y_true,
            y_me,
            y,
            feature_names,
        })
    }

    pub fn m(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn y_true(&self) -> &[f64] {
        &self.y_true
    }

    pub fn y_me(&self) -> &[f64] {
        &self.y_me
    }

    /// Residual target `y_true - y_me`.
    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Rows selected by `index`, in that order.
    pub fn select(&self, index: &[usize]) -> Result<Self, DataError> {
        let m = self.m();
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(DataError::LengthMismatch { expected: m, got: bad });
        }
        let rows: Vec<Vec<f64>> = index.iter().map(|&i| self.features.row(i).to_vec()).collect();
        Self::new(
            Tensor::from_rows(&rows)?,
            index.iter().map(|&i| self.y_true[i]).collect(),
            index.iter().map(|&i| self.y_me[i]).collect(),
            self.feature_names.clone(),
        )
    }

    /// First `head` rows and the remainder.
    pub fn split_at(&self, head: usize) -> Result<(Self, Self), DataError> {
        if head == 0 || head >= self.m() {
            return Err(DataError::Invalid(format!(
                "split point {head} must leave both parts non-empty (m = {})",
                self.m()
            )));
        }
        let first: Vec<usize> = (0..head).collect();
        let rest: Vec<usize> = (head..self.m()).collect();
        Ok((self.select(&first)?, self.select(&rest)?))
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self, DataError> {
        Self::new(features, self.y_true.clone(), self.y_me.clone(), self.feature_names.clone())
    }

    /// Write the CSV schema [`load_csv`] reads. Floats use the shortest
    /// representation that round-trips.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let io_err = |source| DataError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
        let mut header = self.feature_names.clone();
        header.push(Y_TRUE.to_string());
        header.push(Y_ME.to_string());
        writeln!(out, "{}", header.join(",")).map_err(io_err)?;
        for i in 0..self.m() {
            let mut cells: Vec<String> = self.features.row(i).iter().map(|v| format!("{v:?}")).collect();
            cells.push(format!("{:?}", self.y_true[i]));
            cells.push(format!("{:?}", self.y_me[i]));
            writeln!(out, "{}", cells.join(",")).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// Read a dataset. Every column other than `y_true`/`y_me` is a feature, in
/// file order. Lines starting with `#` are skipped.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.iter().all(String::is_empty) {
        return Err(DataError::Empty);
    }
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let true_col = col(Y_TRUE)?;
    let me_col = col(Y_ME)?;
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| c != true_col && c != me_col).collect();
    if feature_cols.is_empty() {
        return Err(DataError::Invalid("no feature columns".into()));
    }

    let mut rows = Vec::new();
    let mut y_true = Vec::new();
    let mut y_me = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based data row number, header excluded
        let row = r + 1;
        if record.len() != header.len() {
            return Err(DataError::RowWidth {
                row,
                got: record.len(),
                expected: header.len(),
            });
        }
        let cell = |c: usize| -> Result<f64, DataError> {
            let raw = &record[c];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(DataError::NonNumeric {
                    row,
                    column: header[c].clone(),
                    value: raw.to_string(),
                }),
            }
        };
        rows.push(feature_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>, _>>()?);
        y_true.push(cell(true_col)?);
        y_me.push(cell(me_col)?);
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let names = feature_cols.iter().map(|&c| header[c].clone()).collect();
    Dataset::new(Tensor::from_rows(&rows)?, y_true, y_me, names)
}

/// Permutation that sorts `keys` ascending, ties kept in original order.
/// `perm[j]` is the original row placed at sorted position `j`.
pub fn sort_permutation(keys: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..keys.len()).collect();
    perm.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// A dataset reordered by one feature column.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdView {
    pub features: Tensor,
    pub targets: Vec<f64>,
    pub perm: Vec<usize>,
    pub sort_feature_index: usize,
}

/// Sort rows ascending by feature `x_prime`; targets follow the same permutation.
pub fn to_psd(d: &Dataset, x_prime: usize) -> Result<PsdView, DataError> {
    let (m, n) = (d.m(), d.n());
    if x_prime >= n {
        return Err(DataError::ColumnOutOfRange { index: x_prime, n });
    }
    let keys: Vec<f64> = (0..m).map(|i| d.features.get2(i, x_prime)).collect();
    let perm = sort_permutation(&keys);
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| d.features.row(i).to_vec()).collect();
    Ok(PsdView {
        features: Tensor::from_rows(&rows)?,
        targets: perm.iter().map(|&i| d.y[i]).collect(),
        perm,
        sort_feature_index: x_prime,
    })
}

impl PsdView {
    /// Put values given in sorted order back into original dataset order.
    pub fn unsort(&self, values: &[f64]) -> Result<Vec<f64>, DataError> {
        unsort_values(values, &self.perm)
    }
}

pub fn unsort_values(values: &[f64], perm: &[usize]) -> Result<Vec<f64>, DataError> {
    if values.len() != perm.len() {
        return Err(DataError::LengthMismatch {
            expected: perm.len(),
            got: values.len(),
        });
    }
    let mut out = vec![0.0; values.len()];
    for (j, &orig) in perm.iter().enumerate() {
        out[orig] = values[j];
    }
    Ok(out)
}

/// Restore original sample order of an `m × 1` prediction column.
pub fn unsort_predictions(p: &Tensor, view: &PsdView) -> Result<Tensor, DataError> {
    let (rows, cols) = p.dims2()?;
    if cols != 1 {
        return Err(DataError::LengthMismatch { expected: 1, got: cols });
    }
    if rows != view.perm.len() {
        return Err(DataError::LengthMismatch {
            expected: view.perm.len(),
            got: rows,
        });
    }
    Ok(Tensor::column(&view.unsort(p.data())?))
}

/// Row indices of the `m` cyclic windows of width `w`, stride 1.
/// Window `i` covers `(i, i+1, .., i+w-1) mod m`.
pub fn cyclic_windows(m: usize, w: usize) -> Result<Vec<Vec<usize>>, DataError> {
    if w < 1 || w > m {
        return Err(DataError::WindowSize { w, m });
    }
    Ok((0..m).map(|i| (0..w).map(|j| (i + j) % m).collect()).collect())
}

/// Side length `k` with `k * k == w`.
pub fn window_side(w: usize) -> Result<usize, DataError> {
    let k = (w as f64).sqrt().round() as usize;
    if w == 0 || k * k != w {
        return Err(DataError::NotPerfectSquare(w));
    }
    Ok(k)
}

/// Pseudo-image data: `m × k × k × n`, one `k × k × n` block per cyclic window.
#[derive(Debug, Clone, PartialEq)]
pub struct PidTensor {
    pub data: Tensor,
    pub window: usize,
    pub source_len: usize,
}

impl PidTensor {
    pub fn side(&self) -> usize {
        self.data.shape()[1]
    }
}

fn pid_index(m: usize, w: usize) -> Result<(usize, Vec<usize>), DataError> {
    let k = window_side(w)?;
    let index = cyclic_windows(m, w)?.into_iter().flatten().collect();
    Ok((k, index))
}

/// Build the pseudo-image of a matrix outside any tape.
pub fn to_pid(a: &Tensor, w: usize) -> Result<PidTensor, DataError> {
    let mut tape = Tape::new();
    let v = tape.constant(a.clone());
    let out = to_pid_var(&mut tape, v, w)?;
    Ok(PidTensor {
        data: tape.value(out).clone(),
        window: w,
        source_len: a.shape()[0],
    })
}

/// Differentiable pseudo-image: a row gather through the window index map,
/// then a reshape so window rows fill the `k × k` grid row-major.
pub fn to_pid_var(tape: &mut Tape, a: Var, w: usize) -> Result<Var, DataError> {
    let (m, n) = tape.value(a).dims2()?;
    let (k, index) = pid_index(m, w)?;
    let windows = tape.gather_rows(a, &index)?;
    Ok(tape.reshape(windows, &[m, k, k, n])?)
}

/// Per-feature min-max scaling fit on one split and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(features: &Tensor) -> Result<Self, DataError> {
        let (m, n) = features.dims2()?;
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for i in 0..m {
            for (c, &v) in features.row(i).iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Ok(Self { min, max })
    }

    /// Constant columns map to 0.
    pub fn transform(&self, features: &Tensor) -> Result<Tensor, DataError> {
        let (m, n) = features.dims2()?;
        if n != self.min.len() {
            return Err(DataError::LengthMismatch {
                expected: self.min.len(),
                got: n,
            });
        }
        let mut out = features.clone();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            let c = idx % n;
            let span = self.max[c] - self.min[c];
            *v = if span > 0.0 { (*v - self.min[c]) / span } else { 0.0 };
        }
        debug_assert_eq!(out.shape(), &[m, n]);
        Ok(out)
    }
}
