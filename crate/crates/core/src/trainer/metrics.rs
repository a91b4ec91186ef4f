use std::collections::BTreeMap;

use ndarray::{s, Array4, ArrayView, Dimension, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// Mean squared error between two uint8 arrays, computed in f64 after
/// widening. NaN for empty inputs.
pub fn mse_u8<D: Dimension>(a: ArrayView<u8, D>, b: ArrayView<u8, D>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse_u8 shape mismatch");
    let mut sum = 0u64;
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let d = x as i64 - y as i64;
        sum += (d * d) as u64;
    });
    sum as f64 / a.len() as f64
}

/// One predicted clip and its ground truth, both (3, c, h, w).
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub city: String,
    pub prediction: Array4<u8>,
    pub truth: Array4<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: f64,
    /// Indexed by target frame.
    pub per_horizon: Vec<f64>,
    pub per_channel: Vec<f64>,
    pub channel_names: Vec<String>,
    pub per_city: BTreeMap<String, f64>,
    pub clips: usize,
    pub elements: u64,
}

#[derive(Default, Clone)]
struct Sums {
    horizon: Vec<u64>,
    channel: Vec<u64>,
    city: BTreeMap<String, (u64, u64)>,
    total: u64,
    elements: u64,
}

impl Sums {
    fn merge(mut self, other: Sums) -> Sums {
        if self.horizon.is_empty() {
            return other;
        }
        if other.horizon.is_empty() {
            return self;
        }
        for (a, b) in self.horizon.iter_mut().zip(other.horizon) {
            *a += b;
        }
        for (a, b) in self.channel.iter_mut().zip(other.channel) {
            *a += b;
        }
        for (city, (s, n)) in other.city {
            let e = self.city.entry(city).or_default();
            e.0 += s;
            e.1 += n;
        }
        self.total += other.total;
        self.elements += other.elements;
        self
    }
}

fn item_sums(item: &EvalItem) -> Sums {
    let (t, c, _, _) = item.truth.dim();
    let mut horizon = vec![0u64; t];
    let mut channel = vec![0u64; c];
    for j in 0..t {
        for k in 0..c {
            let p = item.prediction.slice(s![j, k, .., ..]);
            let q = item.truth.slice(s![j, k, .., ..]);
            let mut s = 0u64;
            Zip::from(&p).and(&q).for_each(|&x, &y| {
                let d = x as i64 - y as i64;
                s += (d * d) as u64;
            });
            horizon[j] += s;
            channel[k] += s;
        }
    }
    let total: u64 = horizon.iter().sum();
    let elements = item.truth.len() as u64;
    Sums {
        horizon,
        channel,
        city: BTreeMap::from([(item.city.clone(), (total, elements))]),
        total,
        elements,
    }
}

/// Aggregates squared errors over all items with exact integer sums, so the
/// result does not depend on item order or thread count.
pub fn evaluate(items: &[EvalItem]) -> Result<Metrics> {
    let first = items.first().ok_or(TrainError::EmptyClips("evaluation"))?;
    let dim = first.truth.dim();
    for item in items {
        if item.truth.dim() != dim || item.prediction.dim() != dim {
            return Err(TrainError::Shape(format!(
                "{}: prediction {:?} / truth {:?}, expected {:?}",
                item.city,
                item.prediction.dim(),
                item.truth.dim(),
                dim
            )));
        }
    }
    let sums = items
        .par_iter()
        .map(item_sums)
        .reduce(Sums::default, Sums::merge);
    let (t, c, h, w) = dim;
    let per_frame = (items.len() * c * h * w) as f64;
    let per_chan = (items.len() * t * h * w) as f64;
    let channel_names = if c == 3 {
        vec!["volume".into(), "speed".into(), "heading".into()]
    } else {
        (0..c).map(|k| format!("channel_{k}")).collect()
    };
    Ok(Metrics {
        overall: sums.total as f64 / sums.elements as f64,
        per_horizon: sums.horizon.iter().map(|&s| s as f64 / per_frame).collect(),
        per_channel: sums.channel.iter().map(|&s| s as f64 / per_chan).collect(),
        channel_names,
        per_city: sums
            .city
            .into_iter()
            .map(|(city, (s, n))| (city, s as f64 / n as f64))
            .collect(),
        clips: items.len(),
        elements: sums.elements,
    })
}
