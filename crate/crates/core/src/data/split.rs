use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numeric::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

/// Partitions `dataset` into `(pool, test)`; both keep the original row order.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction {} not in (0, 1)",
            spec.test_fraction
        )));
    }
    let n = dataset.len();
    let mut rng = Rng::seed_from(spec.seed);
    let mut is_test = vec![false; n];
    if spec.stratified {
        for class in 0..dataset.class_count {
            let mut members: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < 2 {
                return Err(Error::Config(format!(
                    "class {class} has {} sample(s); cannot stratify",
                    members.len()
                )));
            }
            let take = ((members.len() as f64) * spec.test_fraction).round() as usize;
            let take = take.clamp(1, members.len() - 1);
            rng.shuffle(&mut members);
            for &i in &members[..take] {
                is_test[i] = true;
            }
        }
    } else {
        let take = ((n as f64) * spec.test_fraction).round() as usize;
        if take == 0 || take >= n {
            return Err(Error::Config(format!(
                "test_fraction {} of {n} samples leaves an empty side",
                spec.test_fraction
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for &i in &order[..take] {
            is_test[i] = true;
        }
    }
    let test: Vec<usize> = (0..n).filter(|&i| is_test[i]).collect();
    let pool: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    if test.is_empty() || pool.is_empty() {
        return Err(Error::Config("split leaves an empty side".into()));
    }
    Ok((dataset.subset(&pool)?, dataset.subset(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy::gen_toy2;
    use std::collections::HashSet;

    #[test]
    fn ninety_ten() {
        let d = gen_toy2(50, 1);
        let spec = SplitSpec {
            test_fraction: 0.1,
            seed: 4,
            stratified: false,
        };
        let (pool, test) = split(&d, &spec).unwrap();
        assert_eq!((pool.len(), test.len()), (90, 10));
        let a: HashSet<_> = pool.sample_ids.iter().collect();
        let b: HashSet<_> = test.sample_ids.iter().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 100);
        assert_eq!(split(&d, &spec).unwrap(), (pool, test));
    }

    #[test]
    fn stratified_keeps_ratio() {
        let d = gen_toy2(50, 2);
        let spec = SplitSpec {
            test_fraction: 0.2,
            seed: 9,
            stratified: true,
        };
        let (_, test) = split(&d, &spec).unwrap();
        for c in test.class_counts() {
            assert!((c as i64 - 10).abs() <= 1, "{c}");
        }
    }

    #[test]
    fn impossible_requests_are_config_errors() {
        let d = gen_toy2(1, 0);
        let strat = SplitSpec {
            test_fraction: 0.5,
            seed: 0,
            stratified: true,
        };
        assert!(matches!(split(&d, &strat), Err(Error::Config(_))));
        let tiny = SplitSpec {
            test_fraction: 0.01,
            seed: 0,
            stratified: false,
        };
        assert!(matches!(
            split(&gen_toy2(5, 0), &tiny),
            Err(Error::Config(_))
        ));
    }
}
