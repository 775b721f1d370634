//! Coordinate containers and distance computation.
//!
//! Sites live in a geographic space of dimension `d`; latent coordinates add
//! `p` further dimensions. All distances are plain Euclidean over the
//! concatenated coordinates.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Geographic site coordinates: one row per site.
#[derive(Debug, Clone, PartialEq)]
pub struct Locations {
    coords: DMatrix<f64>,
    site_ids: Vec<String>,
}

impl Locations {
    pub fn new(coords: DMatrix<f64>, site_ids: Vec<String>) -> Result<Self> {
        let s = coords.nrows();
        let d = coords.ncols();
        if s < 1 {
            return Err(Error::validation("need at least 1 site"));
        }
        if d < 1 {
            return Err(Error::validation("need at least 1 coordinate dimension"));
        }
        if site_ids.len() != s {
            return Err(Error::validation(format!(
                "{} site ids for {} coordinate rows",
                site_ids.len(),
                s
            )));
        }
        for (i, row) in coords.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "non-finite coordinate at site '{}'",
                    site_ids[i]
                )));
            }
        }
        let mut sorted = site_ids.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != site_ids.len() {
            return Err(Error::validation("site ids are not unique"));
        }
        Ok(Locations { coords, site_ids })
    }

    /// Convenience constructor with site ids "1".."s".
    pub fn from_coords(coords: DMatrix<f64>) -> Result<Self> {
        let ids = (1..=coords.nrows()).map(|i| i.to_string()).collect();
        Locations::new(coords, ids)
    }

    pub fn n_sites(&self) -> usize {
        self.coords.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    /// New Locations keeping only the given row indices (fold construction).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let coords = DMatrix::from_fn(rows.len(), self.n_dims(), |i, j| self.coords[(rows[i], j)]);
        let ids = rows.iter().map(|&i| self.site_ids[i].clone()).collect();
        Locations::new(coords, ids)
    }

    /// Read the `site_id,x1,...,xd` CSV schema.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers()?.clone();
        if headers.is_empty() || &headers[0] != "site_id" {
            return Err(Error::validation(format!(
                "{}: expected header starting with site_id",
                path.display()
            )));
        }
        let d = headers.len() - 1;
        let mut ids = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != d + 1 {
                return Err(Error::validation(format!(
                    "{}: row with {} fields, expected {}",
                    path.display(),
                    record.len(),
                    d + 1
                )));
            }
            ids.push(record[0].to_string());
            for j in 1..=d {
                let v: f64 = record[j]
                    .parse()
                    .map_err(|_| Error::validation(format!("bad coordinate '{}'", &record[j])))?;
                rows.push(v);
            }
        }
        let coords = DMatrix::from_row_slice(ids.len(), d, &rows);
        Locations::new(coords, ids)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["site_id".to_string()];
        header.extend((1..=self.n_dims()).map(|j| format!("x{j}")));
        wtr.write_record(&header)?;
        for (i, row) in self.coords.row_iter().enumerate() {
            let mut rec = vec![self.site_ids[i].clone()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Geographic coordinates concatenated with latent coordinates. The first `d`
/// columns of the full matrix are always the unmodified geographic ones, so
/// projecting back to geographic space is the identity on them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedLocations {
    base: Locations,
    latent: DMatrix<f64>,
}

impl ExpandedLocations {
    pub fn base(&self) -> &Locations {
        &self.base
    }

    pub fn latent(&self) -> &DMatrix<f64> {
        &self.latent
    }

    pub fn n_sites(&self) -> usize {
        self.base.n_sites()
    }

    pub fn n_latent_dims(&self) -> usize {
        self.latent.ncols()
    }

    /// Full s x (d+p) coordinate matrix [X, Z].
    pub fn full_matrix(&self) -> DMatrix<f64> {
        let s = self.n_sites();
        let d = self.base.n_dims();
        let p = self.latent.ncols();
        DMatrix::from_fn(s, d + p, |i, j| {
            if j < d {
                self.base.coords()[(i, j)]
            } else {
                self.latent[(i, j - d)]
            }
        })
    }
}

/// Symmetric matrix of pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn n_sites(&self) -> usize {
        self.d.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }

    pub fn max(&self) -> f64 {
        self.d.iter().fold(0.0, |a, &b| a.max(b))
    }

    /// Mean over the strict upper triangle.
    pub fn mean_off_diagonal(&self) -> f64 {
        let s = self.n_sites();
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..s {
            for j in (i + 1)..s {
                sum += self.d[(i, j)];
                n += 1;
            }
        }
        sum / n as f64
    }
}

/// Concatenate geographic coordinates with a latent matrix.
pub fn expand(base: Locations, latent: DMatrix<f64>) -> Result<ExpandedLocations> {
    if latent.nrows() != base.n_sites() {
        return Err(Error::validation(format!(
            "latent matrix has {} rows for {} sites",
            latent.nrows(),
            base.n_sites()
        )));
    }
    Ok(ExpandedLocations { base, latent })
}

/// Zero-latent expansion (plain geographic space).
pub fn expand_zero(base: Locations) -> ExpandedLocations {
    let s = base.n_sites();
    ExpandedLocations {
        base,
        latent: DMatrix::zeros(s, 0),
    }
}

/// Euclidean pairwise distances over the concatenated coordinates.
pub fn pairwise_distances(locs: &ExpandedLocations) -> Result<DistanceMatrix> {
    for (i, row) in locs.latent.row_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite latent coordinate at site '{}'",
                locs.base.site_ids()[i]
            )));
        }
    }
    Ok(distances_of_matrix(&locs.full_matrix()))
}

/// Pairwise distances of the rows of an arbitrary coordinate matrix.
pub(crate) fn distances_of_matrix(m: &DMatrix<f64>) -> DistanceMatrix {
    let s = m.nrows();
    let mut d = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in (i + 1)..s {
            let diff = m.row(i) - m.row(j);
            let dist = diff.norm();
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    DistanceMatrix { d }
}
