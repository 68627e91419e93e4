//! Analyses of a trained latent space: interpolation, neighborhood grids,
//! reconstruction accuracy, prior validity, and property scatter export.
//!
//! Randomized analyses take a seed; each unit of work (grid cell, dataset
//! element, prior point) draws from its own stream `(seed, index)` so results
//! do not depend on scheduling.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{parse, tree_to_rules, Grammar};
use crate::sampler::{argmax_sequence, sample_sequence, DecodeStatus, Decoded, SamplerError};
use crate::vae::{onehot_for, reparameterize, VaeError, VaeModel};

#[derive(Debug, Error)]
pub enum LatentError {
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("{strings} strings but {properties} property values")]
    LengthMismatch { strings: usize, properties: usize },
    #[error("grid size must be odd, got {0}")]
    EvenGrid(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Random stream for work item `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Argmax,
    Sample,
}

/// Mean of `q(z | s)`.
pub fn mean_encoding(s: &str, model: &VaeModel, g: &Grammar) -> Result<Vec<f64>, LatentError> {
    let x = onehot_for(s, g, model.config().t_max)?;
    Ok(model.encode(&x)?.mean)
}

/// Decodes each latent point once.
pub fn decode_points<R: Rng>(
    zs: &[Vec<f64>],
    model: &VaeModel,
    g: &Grammar,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Vec<Decoded>, LatentError> {
    let logits = model.decode_logits_batch(zs)?;
    logits
        .iter()
        .map(|f| {
            Ok(match mode {
                DecodeMode::Argmax => argmax_sequence(f, g)?,
                DecodeMode::Sample => sample_sequence(f, g, rng)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationRow {
    pub coefficient: f64,
    pub text: Option<String>,
    pub status: DecodeStatus,
}

impl InterpolationRow {
    pub fn valid(&self) -> bool {
        self.text.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub from: String,
    pub to: String,
    pub rows: Vec<InterpolationRow>,
}

/// Decodes `steps + 1` evenly spaced points on the segment between the
/// mean encodings of `s1` and `s2`. Sampling uses stream `(seed, row)`.
pub fn interpolate(
    s1: &str,
    s2: &str,
    steps: usize,
    model: &VaeModel,
    g: &Grammar,
    mode: DecodeMode,
    seed: u64,
) -> Result<InterpolationReport, LatentError> {
    let a = mean_encoding(s1, model, g)?;
    let b = mean_encoding(s2, model, g)?;
    let coefs: Vec<f64> = (0..=steps)
        .map(|i| {
            if steps == 0 {
                0.0
            } else {
                i as f64 / steps as f64
            }
        })
        .collect();
    let zs: Vec<Vec<f64>> = coefs
        .iter()
        .map(|&c| {
            a.iter()
                .zip(&b)
                .map(|(u, v)| (1.0 - c) * u + c * v)
                .collect()
        })
        .collect();
    let logits = model.decode_logits_batch(&zs)?;
    let rows = coefs
        .iter()
        .zip(&logits)
        .enumerate()
        .map(|(i, (&coefficient, f))| {
            let d = match mode {
                DecodeMode::Argmax => argmax_sequence(f, g)?,
                DecodeMode::Sample => sample_sequence(f, g, &mut stream_rng(seed, i as u64))?,
            };
            Ok(InterpolationRow {
                coefficient,
                text: d.text(g),
                status: d.status,
            })
        })
        .collect::<Result<_, LatentError>>()?;
    Ok(InterpolationReport {
        from: s1.into(),
        to: s2.into(),
        rows,
    })
}

/// Plain-text table: the two input strings in bold markers at the ends,
/// decoded rows in between, invalid rows flagged.
pub fn format_interpolation(r: &InterpolationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "**{}**", r.from);
    for row in &r.rows {
        match &row.text {
            Some(t) => {
                let _ = writeln!(out, "{:.3}  {t}", row.coefficient);
            }
            None => {
                let _ = writeln!(out, "{:.3}  [invalid: exhausted]", row.coefficient);
            }
        }
    }
    let _ = writeln!(out, "**{}**", r.to);
    out
}

pub fn interpolation_csv<W: Write>(r: &InterpolationReport, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "coefficient,valid,text")?;
    for row in &r.rows {
        writeln!(
            w,
            "{},{},{}",
            row.coefficient,
            row.valid(),
            csv_field(row.text.as_deref().unwrap_or(""))
        )?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Orthonormalizes two Gaussian draws.
pub fn random_orthonormal_pair<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    assert!(dim >= 2, "need at least two dimensions");
    let draw = |rng: &mut R| -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    loop {
        let mut u = draw(rng);
        let mut v = draw(rng);
        let nu = norm(&u);
        if nu < 1e-8 {
            continue;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        for _ in 0..2 {
            let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(&u).for_each(|(b, a)| *b -= d * a);
        }
        let nv = norm(&v);
        if nv < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        return (u, v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    /// Offsets along the two directions.
    pub offset: (f64, f64),
    /// Most frequent valid decode, ties broken lexicographically.
    pub modal: Option<String>,
    pub frequency: usize,
    pub valid: usize,
    pub decodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub center: Vec<f64>,
    pub directions: (Vec<f64>, Vec<f64>),
    pub cells: Vec<GridCell>,
}

/// Most frequent string, lexicographically smallest among ties.
pub fn modal_string<'a>(items: impl IntoIterator<Item = &'a str>) -> Option<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in items {
        *counts.entry(s).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(s, n)| (s.to_string(), n))
}

/// Decodes `decodes` samples at each point of a `grid_n x grid_n` grid
/// spanned by two random orthonormal directions around the mean encoding
/// of `s`. Offsets run from `-radius` to `radius` along each direction.
pub fn neighborhood_grid(
    s: &str,
    radius: f64,
    grid_n: usize,
    decodes: usize,
    model: &VaeModel,
    g: &Grammar,
    seed: u64,
) -> Result<GridReport, LatentError> {
    if grid_n.is_multiple_of(2) {
        return Err(LatentError::EvenGrid(grid_n));
    }
    let center = mean_encoding(s, model, g)?;
    let (d1, d2) = random_orthonormal_pair(center.len(), &mut stream_rng(seed, 0));
    let half = (grid_n / 2) as f64;
    let step = |i: usize| {
        if half == 0.0 {
            0.0
        } else {
            radius * (i as f64 - half) / half
        }
    };
    let cells = (0..grid_n * grid_n)
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx / grid_n, idx % grid_n);
            let (a, b) = (step(row), step(col));
            let z: Vec<f64> = center
                .iter()
                .zip(d1.iter().zip(&d2))
                .map(|(c, (u, v))| c + a * u + b * v)
                .collect();
            let f = model.decode_logits(&z)?;
            let mut rng = stream_rng(seed, 1 + idx as u64);
            let texts: Vec<Option<String>> = (0..decodes)
                .map(|_| Ok(sample_sequence(&f, g, &mut rng)?.text(g)))
                .collect::<Result<_, LatentError>>()?;
            let valid: Vec<&str> = texts.iter().flatten().map(String::as_str).collect();
            let (modal, frequency) = match modal_string(valid.iter().copied()) {
                Some((m, n)) => (Some(m), n),
                None => (None, 0),
            };
            Ok(GridCell {
                row,
                col,
                offset: (a, b),
                modal,
                frequency,
                valid: valid.len(),
                decodes,
            })
        })
        .collect::<Result<Vec<_>, LatentError>>()?;
    Ok(GridReport {
        center,
        directions: (d1, d2),
        cells,
    })
}

pub fn grid_csv<W: Write>(r: &GridReport, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "row,col,offset1,offset2,modal,frequency,valid,decodes")?;
    for c in &r.cells {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            c.row,
            c.col,
            c.offset.0,
            c.offset.1,
            csv_field(c.modal.as_deref().unwrap_or("")),
            c.frequency,
            c.valid,
            c.decodes
        )?;
    }
    Ok(())
}

/// Per-string reconstruction outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionStats {
    pub accuracy: f64,
    pub per_string: Vec<f64>,
}

/// Encodes each string `n_encode` times (sampling `q(z | s)`), decodes every
/// encoding `n_decode` times, and averages the fraction of exact matches.
pub fn reconstruction_accuracy(
    dataset: &[String],
    n_encode: usize,
    n_decode: usize,
    model: &VaeModel,
    g: &Grammar,
    mode: DecodeMode,
    seed: u64,
) -> Result<ReconstructionStats, LatentError> {
    let per_string = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let x = onehot_for(s, g, model.config().t_max)?;
            let q = model.encode(&x)?;
            let mut rng = stream_rng(seed, i as u64);
            let zs: Vec<Vec<f64>> = (0..n_encode)
                .map(|_| {
                    let eps: Vec<f64> = (0..q.dim()).map(|_| rng.sample(StandardNormal)).collect();
                    reparameterize(&q, &eps)
                })
                .collect();
            let logits = model.decode_logits_batch(&zs)?;
            let mut hits = 0usize;
            for f in &logits {
                for _ in 0..n_decode {
                    let d = match mode {
                        DecodeMode::Argmax => argmax_sequence(f, g)?,
                        DecodeMode::Sample => sample_sequence(f, g, &mut rng)?,
                    };
                    if d.text(g).as_deref() == Some(s.as_str()) {
                        hits += 1;
                    }
                }
            }
            let total = n_encode * n_decode;
            Ok(if total == 0 {
                0.0
            } else {
                hits as f64 / total as f64
            })
        })
        .collect::<Result<Vec<f64>, LatentError>>()?;
    let accuracy = if per_string.is_empty() {
        0.0
    } else {
        per_string.iter().sum::<f64>() / per_string.len() as f64
    };
    Ok(ReconstructionStats {
        accuracy,
        per_string,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorValidity {
    pub fraction: f64,
    pub valid: usize,
    pub exhausted: usize,
    /// Complete decodes whose text fails to re-parse to the same rules.
    pub malformed: usize,
    pub total: usize,
}

/// Decodes `n_decodes` samples at each of `n_points` prior draws.
pub fn prior_validity(
    n_points: usize,
    n_decodes: usize,
    model: &VaeModel,
    g: &Grammar,
    seed: u64,
) -> Result<PriorValidity, LatentError> {
    let z_dim = model.config().z_dim;
    let counts = (0..n_points)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let z: Vec<f64> = (0..z_dim).map(|_| rng.sample(StandardNormal)).collect();
            let f = model.decode_logits(&z)?;
            let (mut valid, mut exhausted, mut malformed) = (0, 0, 0);
            for _ in 0..n_decodes {
                let d = sample_sequence(&f, g, &mut rng)?;
                match d.status {
                    DecodeStatus::Complete => match d.text(g) {
                        Some(t)
                            if parse(&t, g).map(|p| tree_to_rules(&p)).as_ref() == Ok(&d.rules) =>
                        {
                            valid += 1
                        }
                        _ => malformed += 1,
                    },
                    _ => exhausted += 1,
                }
            }
            Ok((valid, exhausted, malformed))
        })
        .collect::<Result<Vec<_>, LatentError>>()?;
    let (valid, exhausted, malformed) = counts
        .iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let total = n_points * n_decodes;
    Ok(PriorValidity {
        fraction: if total == 0 {
            0.0
        } else {
            valid as f64 / total as f64
        },
        valid,
        exhausted,
        malformed,
        total,
    })
}

/// Writes `z1, ..., z_d, property` rows of mean encodings. Returns the row count.
pub fn latent_property_scatter<W: Write>(
    dataset: &[String],
    properties: &[f64],
    model: &VaeModel,
    g: &Grammar,
    w: &mut W,
) -> Result<usize, LatentError> {
    if dataset.len() != properties.len() {
        return Err(LatentError::LengthMismatch {
            strings: dataset.len(),
            properties: properties.len(),
        });
    }
    let d = model.config().z_dim;
    let header: Vec<String> = (1..=d)
        .map(|i| format!("z{i}"))
        .chain(["property".into()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (s, p) in dataset.iter().zip(properties) {
        let z = mean_encoding(s, model, g)?;
        let fields: Vec<String> = z
            .iter()
            .map(|v| v.to_string())
            .chain([p.to_string()])
            .collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(dataset.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::{ArchConfig, VaeConfig};

    fn model(seed: u64) -> VaeModel {
        let g = Grammar::equations();
        let mut c = VaeConfig::equations(&g);
        c.z_dim = 5;
        c.arch = ArchConfig {
            conv_widths: vec![2, 3],
            conv_channels: vec![6, 6],
            encoder_hidden: 16,
            decoder_hidden: 16,
            gru_hidden: 16,
            gru_layers: 1,
        };
        VaeModel::new(c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn orthonormal_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in [2, 5, 56] {
            let (u, v) = random_orthonormal_pair(dim, &mut rng);
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|a| a * a).sum();
            let nv: f64 = v.iter().map(|a| a * a).sum();
            assert!(dot.abs() < 1e-10 && (nu - 1.0).abs() < 1e-10 && (nv - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn modal_ties_are_lexicographic() {
        assert_eq!(modal_string(["b", "a", "b", "a"]), Some(("a".into(), 2)));
        assert_eq!(modal_string(["x", "y", "y"]), Some(("y".into(), 2)));
        assert_eq!(modal_string(std::iter::empty()), None);
    }

    #[test]
    fn interpolation_cases() {
        let g = Grammar::equations();
        let m = model(2);
        let one = interpolate("x+1", "sin(x)", 0, &m, &g, DecodeMode::Argmax, 0).unwrap();
        assert_eq!(one.rows.len(), 1);
        let direct = argmax_sequence(
            &m.decode_logits(&mean_encoding("x+1", &m, &g).unwrap())
                .unwrap(),
            &g,
        )
        .unwrap();
        assert_eq!(one.rows[0].text, direct.text(&g));

        let same = interpolate("x*2", "x*2", 4, &m, &g, DecodeMode::Argmax, 0).unwrap();
        assert!(same.rows.windows(2).all(|w| w[0].text == w[1].text));

        let r = interpolate("x", "3*exp(x)", 6, &m, &g, DecodeMode::Sample, 9).unwrap();
        assert!(r
            .rows
            .windows(2)
            .all(|w| w[0].coefficient < w[1].coefficient));
        for row in &r.rows {
            if let Some(t) = &row.text {
                assert!(parse(t, &g).is_ok());
            } else {
                assert_eq!(row.status, DecodeStatus::Exhausted);
            }
        }
        assert!(format_interpolation(&r).starts_with("**x**\n"));
        assert!(interpolate("x+", "x", 2, &m, &g, DecodeMode::Argmax, 0).is_err());
    }

    #[test]
    fn grid_with_zero_radius() {
        let g = Grammar::equations();
        let m = model(3);
        let r = neighborhood_grid("x+2", 0.0, 3, 40, &m, &g, 4).unwrap();
        assert_eq!(r.cells.len(), 9);
        assert!(r
            .cells
            .iter()
            .all(|c| c.offset == (0.0, 0.0) && c.frequency <= c.decodes));
        assert!(neighborhood_grid("x", 1.0, 4, 1, &m, &g, 0).is_err());
        let again = neighborhood_grid("x+2", 0.0, 3, 40, &m, &g, 4).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn untrained_reconstruction_and_determinism() {
        let g = Grammar::equations();
        let m = model(4);
        let data: Vec<String> = ["x*x+1", "sin(3)", "exp(x)/2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let a = reconstruction_accuracy(&data, 1, 1, &m, &g, DecodeMode::Sample, 5).unwrap();
        let b = reconstruction_accuracy(&data, 1, 1, &m, &g, DecodeMode::Sample, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.accuracy <= 1.0);
    }

    #[test]
    fn prior_validity_has_no_malformed() {
        let g = Grammar::equations();
        let m = model(5);
        let p = prior_validity(30, 10, &m, &g, 6).unwrap();
        assert_eq!(p.total, 300);
        assert_eq!(p.malformed, 0);
        assert_eq!(p.valid + p.exhausted, 300);
        assert_eq!(p, prior_validity(30, 10, &m, &g, 6).unwrap());
    }

    #[test]
    fn scatter_rows() {
        let g = Grammar::equations();
        let m = model(6);
        let data: Vec<String> = vec!["x".into(), "2+x".into()];
        let mut out = Vec::new();
        assert_eq!(
            latent_property_scatter(&data, &[1.0, 2.5], &m, &g, &mut out).unwrap(),
            2
        );
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "z1,z2,z3,z4,z5,property");
        let z: Vec<f64> = lines[1]
            .split(',')
            .take(5)
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(z, mean_encoding("x", &m, &g).unwrap());

        let mut empty = Vec::new();
        latent_property_scatter(&[], &[], &m, &g, &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().lines().count(), 1);
        assert!(latent_property_scatter(&data, &[1.0], &m, &g, &mut Vec::new()).is_err());
    }
}
