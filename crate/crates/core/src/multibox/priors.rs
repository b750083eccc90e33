//! Default boxes tiled over every pyramid level.

use serde::{Deserialize, Serialize};

use crate::boxes::{CenterBox, Variances};
use crate::error::{Error, Result};

/// Prior layout of one pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub feature_size: usize,
    pub scale: f64,
    pub next_scale: f64,
    /// Ratios other than 1; each contributes `a` and `1/a`.
    pub extra_ratios: Vec<f64>,
}

impl PriorSpec {
    pub fn priors_per_location(&self) -> usize {
        2 + 2 * self.extra_ratios.len()
    }

    pub fn count(&self) -> usize {
        self.priors_per_location() * self.feature_size * self.feature_size
    }
}

/// JSON-facing prior settings (`priors.*`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Scale of level 0.
    pub first_scale: f64,
    /// Levels 1.. are spaced linearly from `min_scale` to `max_scale`.
    pub min_scale: f64,
    pub max_scale: f64,
    /// `next_scale` of the last level.
    pub final_scale: f64,
    pub extra_ratios: Vec<Vec<f64>>,
    pub variances: Variances,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::preset(300).expect("300 preset")
    }
}

impl PriorConfig {
    pub fn preset(input_size: usize) -> Result<Self> {
        let (first_scale, min_scale, extra_ratios) = match input_size {
            300 => (0.1, 0.2, vec![vec![2.0], vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0], vec![2.0]]),
            512 => (
                0.07,
                0.15,
                vec![vec![2.0], vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0], vec![2.0]],
            ),
            other => return Err(Error::Config(format!("no prior preset for input size {other}"))),
        };
        Ok(PriorConfig {
            first_scale,
            min_scale,
            max_scale: 0.9,
            final_scale: 1.0,
            extra_ratios,
            variances: Variances::default(),
        })
    }

    pub fn levels(&self) -> usize {
        self.extra_ratios.len()
    }

    pub fn scales(&self) -> Vec<f64> {
        let m = self.levels();
        (0..m)
            .map(|k| match k {
                0 => self.first_scale,
                _ if m <= 2 => self.min_scale,
                _ => self.min_scale + (self.max_scale - self.min_scale) * (k - 1) as f64 / (m - 2) as f64,
            })
            .collect()
    }

    /// Per-level specs for the given pyramid sizes.
    pub fn specs(&self, level_sizes: &[usize]) -> Result<Vec<PriorSpec>> {
        if level_sizes.len() != self.levels() {
            return Err(Error::Config(format!(
                "priors describe {} levels but the pyramid has {}",
                self.levels(),
                level_sizes.len()
            )));
        }
        let scales = self.scales();
        Ok(level_sizes
            .iter()
            .enumerate()
            .map(|(k, &f)| PriorSpec {
                feature_size: f,
                scale: scales[k],
                next_scale: scales.get(k + 1).copied().unwrap_or(self.final_scale),
                extra_ratios: self.extra_ratios[k].clone(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorBoxSet {
    pub boxes: Vec<CenterBox>,
    pub level: Vec<usize>,
    pub specs: Vec<PriorSpec>,
}

impl PriorBoxSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn priors_per_location(&self) -> Vec<usize> {
        self.specs.iter().map(PriorSpec::priors_per_location).collect()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.feature_size).collect()
    }
}

/// Tiles priors in (level, row, col, anchor) order. Within a cell the anchor
/// order is: ratio 1 at `s_k`, ratio 1 at `√(s_k·s_{k+1})`, then `a`, `1/a`
/// for each extra ratio.
pub fn generate_priors(specs: &[PriorSpec]) -> Result<PriorBoxSet> {
    let mut boxes = Vec::new();
    let mut level = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        if !(spec.scale > 0.0) || !(spec.next_scale > 0.0) {
            return Err(Error::invalid("generate_priors", format!("level {k}: non-positive scale")));
        }
        if spec.feature_size == 0 {
            return Err(Error::invalid("generate_priors", format!("level {k}: empty feature map")));
        }
        if spec.extra_ratios.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("generate_priors", format!("level {k}: non-positive ratio")));
        }
        let s = spec.scale;
        let mut shapes = vec![(s, s), {
            let s2 = (s * spec.next_scale).sqrt();
            (s2, s2)
        }];
        for &a in &spec.extra_ratios {
            let r = a.sqrt();
            shapes.push((s * r, s / r));
            shapes.push((s / r, s * r));
        }
        let f = spec.feature_size as f64;
        for i in 0..spec.feature_size {
            for j in 0..spec.feature_size {
                let (cx, cy) = ((j as f64 + 0.5) / f, (i as f64 + 0.5) / f);
                for &(w, h) in &shapes {
                    boxes.push([cx, cy, w, h]);
                    level.push(k);
                }
            }
        }
    }
    Ok(PriorBoxSet {
        boxes,
        level,
        specs: specs.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::pyramid_sizes;

    #[test]
    fn preset_counts() {
        let c = PriorConfig::preset(300).unwrap();
        let p = generate_priors(&c.specs(&pyramid_sizes(38, 6)).unwrap()).unwrap();
        assert_eq!(p.len(), 8732);
        assert_eq!(p.priors_per_location(), vec![4, 6, 6, 6, 4, 4]);
        let c = PriorConfig::preset(512).unwrap();
        let p = generate_priors(&c.specs(&pyramid_sizes(64, 7)).unwrap()).unwrap();
        assert_eq!(p.len(), 24564);
    }

    #[test]
    fn single_cell() {
        let spec = PriorSpec {
            feature_size: 1,
            scale: 0.5,
            next_scale: 0.8,
            extra_ratios: vec![2.0],
        };
        let p = generate_priors(&[spec]).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.boxes.iter().all(|b| b[0] == 0.5 && b[1] == 0.5));
        assert!((p.boxes[1][2] - 0.4f64.sqrt()).abs() < 1e-15);
        assert!((p.boxes[2][2] / p.boxes[2][3] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scales_are_linear_after_first() {
        let s = PriorConfig::preset(300).unwrap().scales();
        assert_eq!(s[0], 0.1);
        assert!((s[1] - 0.2).abs() < 1e-15 && (s[5] - 0.9).abs() < 1e-15);
        assert!((s[3] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_scale() {
        let spec = PriorSpec {
            feature_size: 2,
            scale: 0.0,
            next_scale: 0.3,
            extra_ratios: vec![],
        };
        assert!(generate_priors(&[spec]).is_err());
    }

    #[test]
    fn centers_inside_unit_square() {
        let c = PriorConfig::preset(300).unwrap();
        let p = generate_priors(&c.specs(&pyramid_sizes(38, 6)).unwrap()).unwrap();
        assert!(p.boxes.iter().all(|b| b[0] > 0.0 && b[0] < 1.0 && b[1] > 0.0 && b[1] < 1.0));
        assert!(p.boxes.iter().all(|b| b[2] > 0.0 && b[3] > 0.0));
    }
}
