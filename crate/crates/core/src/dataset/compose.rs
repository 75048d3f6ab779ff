use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{instance_combinations, CompositionSpec, DatasetManifest, Instance, Ratio, Subgroup};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Largest joint table the exhaustive rounding search accepts.
const MAX_JOINT_ATTRIBUTES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedSplit {
    /// One composition per manifest attribute, in manifest order.
    pub compositions: Vec<CompositionSpec>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub train_counts: BTreeMap<String, usize>,
    pub test_per_subgroup: usize,
}

impl ComposedSplit {
    pub fn ids(&self) -> SplitIds {
        SplitIds {
            train: self.train.clone(),
            test: self.test.clone(),
        }
    }

    pub fn composition(&self, attribute: &str) -> Option<&CompositionSpec> {
        self.compositions.iter().find(|c| c.attribute == attribute)
    }
}

/// Shuffled ids of every subgroup (sorted by id first, then permuted with a
/// per-subgroup seed), in canonical subgroup order.
fn shuffled_pools(manifest: &DatasetManifest, seed: u64) -> BTreeMap<Subgroup, Vec<String>> {
    let mut pools: BTreeMap<Subgroup, Vec<String>> = Subgroup::enumerate(manifest.attributes.len())
        .into_iter()
        .map(|s| (s, Vec::new()))
        .collect();
    for s in &manifest.samples {
        pools.entry(s.subgroup()).or_default().push(s.id.clone());
    }
    for (i, ids) in pools.values_mut().enumerate() {
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "subgroup", &i.to_string()));
        ids.shuffle(&mut rng);
    }
    pools
}

/// Reserves `test_fraction` of the smallest subgroup from every subgroup, so
/// the test split is balanced and independent of any composition. Returns
/// the test ids and the remaining per-subgroup training pools.
pub fn reserve_test_split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, BTreeMap<Subgroup, Vec<String>>, usize)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} must lie in [0, 1)"
        )));
    }
    let mut pools = shuffled_pools(manifest, seed);
    let smallest = pools.values().map(Vec::len).min().unwrap_or(0);
    if let Some((sg, _)) = pools.iter().find(|(_, ids)| ids.is_empty()) {
        return Err(Error::InsufficientSamples {
            subgroup: manifest.subgroup_label(sg),
            needed: 1,
            available: 0,
        });
    }
    let per_subgroup = (test_fraction * smallest as f64).round() as usize;
    let mut test = Vec::with_capacity(per_subgroup * pools.len());
    for ids in pools.values_mut() {
        test.extend(ids.drain(..per_subgroup));
    }
    Ok((test, pools, per_subgroup))
}

/// Training split biased on one attribute; every other attribute stays 1:1.
/// Class 0 receives `round(f_A × class_train_size)` samples of instance A,
/// class 1 the interchanged ratio.
pub fn compose_split(
    manifest: &DatasetManifest,
    composition: &CompositionSpec,
    class_train_size: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<ComposedSplit> {
    compose(
        manifest,
        std::slice::from_ref(composition),
        class_train_size,
        test_fraction,
        seed,
        false,
    )
}

/// Training split realizing several per-attribute compositions at once;
/// joint subgroup counts follow the product of the marginal ratios.
pub fn compose_joint_split(
    manifest: &DatasetManifest,
    compositions: &[CompositionSpec],
    class_train_size: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<ComposedSplit> {
    if manifest.attributes.len() < 2 {
        return Err(Error::Config(
            "joint composition needs at least two attributes".into(),
        ));
    }
    compose(manifest, compositions, class_train_size, test_fraction, seed, true)
}

fn compose(
    manifest: &DatasetManifest,
    compositions: &[CompositionSpec],
    class_train_size: usize,
    test_fraction: f64,
    seed: u64,
    joint: bool,
) -> Result<ComposedSplit> {
    let k = manifest.attributes.len();
    let mut full: Vec<CompositionSpec> = manifest
        .attributes
        .iter()
        .map(|a| CompositionSpec::new(&a.name, Ratio::balanced()))
        .collect();
    for c in compositions {
        let idx = manifest.attribute_index(&c.attribute)?;
        full[idx] = c.clone();
    }
    let (test, mut pools, test_per_subgroup) = reserve_test_split(manifest, test_fraction, seed)?;
    if joint {
        if let Some((sg, _)) = pools.iter().find(|(_, ids)| ids.is_empty()) {
            return Err(Error::Config(format!(
                "joint subgroup {} has no training samples",
                manifest.subgroup_label(sg)
            )));
        }
    }

    let mut train = Vec::new();
    let mut train_counts = BTreeMap::new();
    for class_label in 0..2u8 {
        let fractions: Vec<[f64; 2]> = full.iter().map(|c| c.ratio.fractions(class_label)).collect();
        let counts = allocate_class_counts(class_train_size, &fractions)?;
        let available: Vec<usize> = counts
            .iter()
            .map(|(inst, _)| {
                pools[&Subgroup {
                    class_label,
                    instances: inst.clone(),
                }]
                    .len()
            })
            .collect();
        let short = counts
            .iter()
            .zip(&available)
            .find(|((_, n), avail)| n > avail);
        if let Some(((inst, n), avail)) = short {
            let sg = Subgroup {
                class_label,
                instances: inst.clone(),
            };
            if joint {
                let exact: Vec<f64> = counts
                    .iter()
                    .map(|(inst, _)| exact_count(class_train_size, &fractions, inst))
                    .collect();
                let suggestion = closest_feasible(class_train_size, &exact, &available);
                return Err(Error::InfeasibleJoint {
                    class: class_label,
                    reason: format!(
                        "subgroup {} needs {n} but only {avail} remain after the test split",
                        manifest.subgroup_label(&sg)
                    ),
                    suggestion: counts
                        .iter()
                        .zip(suggestion)
                        .map(|((inst, _), n)| {
                            (
                                manifest.subgroup_label(&Subgroup {
                                    class_label,
                                    instances: inst.clone(),
                                }),
                                n,
                            )
                        })
                        .collect(),
                });
            }
            return Err(Error::InsufficientSamples {
                subgroup: manifest.subgroup_label(&sg),
                needed: *n,
                available: *avail,
            });
        }
        for (inst, n) in counts {
            let sg = Subgroup {
                class_label,
                instances: inst,
            };
            let pool = pools.get_mut(&sg).expect("enumerated subgroup");
            train.extend(pool.iter().take(n).cloned());
            train_counts.insert(manifest.subgroup_label(&sg), n);
        }
    }
    debug_assert_eq!(k, full.len());
    Ok(ComposedSplit {
        compositions: full,
        train,
        test,
        train_counts,
        test_per_subgroup,
    })
}

fn exact_count(total: usize, fractions: &[[f64; 2]], instances: &[Instance]) -> f64 {
    total as f64
        * fractions
            .iter()
            .zip(instances)
            .map(|(f, i)| f[i.index()])
            .product::<f64>()
}

/// Integer joint counts for one class whose total is exactly `total`.
///
/// Each cell receives the floor or ceiling of its exact share
/// `total × Π p_attr(instance)`. Among those roundings the chosen one
/// minimizes, in order: the largest marginal deviation over all
/// (attribute, instance) pairs, the sum of squared cell deviations, and
/// finally prefers rounding up earlier cells. With one attribute this is
/// largest-remainder rounding with ties going to instance A.
pub fn allocate_class_counts(
    total: usize,
    fractions: &[[f64; 2]],
) -> Result<Vec<(Vec<Instance>, usize)>> {
    let k = fractions.len();
    if k == 0 || k > MAX_JOINT_ATTRIBUTES {
        return Err(Error::Config(format!(
            "allocation supports 1..={MAX_JOINT_ATTRIBUTES} attributes, got {k}"
        )));
    }
    for f in fractions {
        if (f[0] + f[1] - 1.0).abs() > 1e-9 || f[0] < 0.0 || f[1] < 0.0 {
            return Err(Error::Config(format!("fractions {f:?} do not sum to 1")));
        }
    }
    let cells = instance_combinations(k);
    let exact: Vec<f64> = cells
        .iter()
        .map(|inst| exact_count(total, fractions, inst))
        .collect();
    let floors: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let fractional: Vec<usize> = (0..cells.len())
        .filter(|&i| exact[i] - floors[i] as f64 > 1e-9)
        .collect();
    let remaining = total - floors.iter().sum::<usize>();

    let score = |counts: &[usize]| -> (i64, i64) {
        let mut worst = 0.0f64;
        for a in 0..k {
            for inst in Instance::BOTH {
                let dev: f64 = cells
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c[a] == inst)
                    .map(|(i, _)| counts[i] as f64 - exact[i])
                    .sum();
                worst = worst.max(dev.abs());
            }
        }
        let sq: f64 = counts
            .iter()
            .zip(&exact)
            .map(|(c, e)| (*c as f64 - e).powi(2))
            .sum();
        ((worst * 1e6).round() as i64, (sq * 1e6).round() as i64)
    };

    let mut best: Option<((i64, i64), Vec<usize>)> = None;
    for chosen in combinations(&fractional, remaining) {
        let mut counts = floors.clone();
        for i in &chosen {
            counts[*i] += 1;
        }
        let s = score(&counts);
        // Combinations arrive in lexicographic order, so strict improvement
        // keeps the earliest-index choice on ties.
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, counts));
        }
    }
    let counts = best.map(|(_, c)| c).unwrap_or(floors);
    Ok(cells.into_iter().zip(counts).collect())
}

fn combinations(items: &[usize], r: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], r: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            if items.len() - i < r - cur.len() {
                break;
            }
            cur.push(items[i]);
            rec(items, r, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if r <= items.len() {
        rec(items, r, 0, &mut Vec::new(), &mut out);
    }
    out
}

/// Allocation closest to `exact` that respects per-cell availability.
fn closest_feasible(total: usize, exact: &[f64], available: &[usize]) -> Vec<usize> {
    let mut counts: Vec<usize> = exact
        .iter()
        .zip(available)
        .map(|(e, a)| (e.floor() as usize).min(*a))
        .collect();
    let mut missing = total.saturating_sub(counts.iter().sum());
    while missing > 0 {
        let pick = (0..counts.len())
            .filter(|&i| counts[i] < available[i])
            .max_by(|&i, &j| {
                (exact[i] - counts[i] as f64)
                    .partial_cmp(&(exact[j] - counts[j] as f64))
                    .unwrap()
                    .then(j.cmp(&i))
            });
        match pick {
            Some(i) => {
                counts[i] += 1;
                missing -= 1;
            }
            None => break,
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SyntheticConfig};

    fn ratio(s: &str) -> Ratio {
        s.parse().unwrap()
    }

    fn manifest(per_subgroup: usize, attributes: usize) -> DatasetManifest {
        generate_synthetic_dataset(&SyntheticConfig {
            per_subgroup,
            attribute_count: attributes,
            seed: 3,
            width: 32,
            height: 32,
            glyph_size: 5,
            marker_size: 6,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn counts_for(split: &ComposedSplit, ds: &DatasetManifest, class_label: u8, attr: usize) -> [usize; 2] {
        let index = ds.index();
        let mut out = [0; 2];
        for id in &split.train {
            let s = &ds.samples[index[id.as_str()]];
            if s.class_label == class_label {
                out[s.attributes[attr].index()] += 1;
            }
        }
        out
    }

    #[test]
    fn one_to_zero_puts_all_of_a_in_class_zero() {
        let ds = manifest(100, 1);
        let split = compose_split(&ds, &CompositionSpec::new("disc_color", ratio("1:0")), 60, 0.25, 1).unwrap();
        assert_eq!(counts_for(&split, &ds, 0, 0), [60, 0]);
        assert_eq!(counts_for(&split, &ds, 1, 0), [0, 60]);
    }

    #[test]
    fn three_to_one_rounds_exactly() {
        let counts = allocate_class_counts(200, &[ratio("3:1").fractions(0)]).unwrap();
        assert_eq!(counts[0].1, 150);
        assert_eq!(counts[1].1, 50);
        // Odd total: 150.75 / 50.25 -> 151 / 50; class total preserved.
        let odd = allocate_class_counts(201, &[ratio("3:1").fractions(0)]).unwrap();
        assert_eq!((odd[0].1, odd[1].1), (151, 50));
        // Exact tie goes to A.
        let tie = allocate_class_counts(201, &[ratio("1:1").fractions(0)]).unwrap();
        assert_eq!((tie[0].1, tie[1].1), (101, 100));
    }

    #[test]
    fn test_split_is_balanced_and_disjoint() {
        let ds = manifest(40, 2);
        let split = compose_split(&ds, &CompositionSpec::new("disc_color", ratio("3:1")), 40, 0.25, 9).unwrap();
        assert_eq!(split.test_per_subgroup, 10);
        let index = ds.index();
        let mut per: BTreeMap<Subgroup, usize> = BTreeMap::new();
        for id in &split.test {
            *per.entry(ds.samples[index[id.as_str()]].subgroup()).or_default() += 1;
        }
        assert_eq!(per.len(), 8);
        assert!(per.values().all(|&n| n == 10));
        assert!(split.train.iter().all(|id| !split.test.contains(id)));
    }

    #[test]
    fn test_split_is_shared_across_compositions() {
        let ds = manifest(20, 1);
        let a = compose_split(&ds, &CompositionSpec::new("disc_color", ratio("1:0")), 10, 0.25, 4).unwrap();
        let b = compose_split(&ds, &CompositionSpec::new("disc_color", ratio("1:3")), 10, 0.25, 4).unwrap();
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn insufficient_subgroup_is_named() {
        let ds = manifest(20, 1);
        let err = compose_split(&ds, &CompositionSpec::new("disc_color", ratio("1:0")), 16, 0.25, 1)
            .unwrap_err();
        match err {
            Error::InsufficientSamples {
                subgroup,
                needed,
                available,
            } => {
                assert_eq!(subgroup, "plus/red");
                assert_eq!((needed, available), (16, 15));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn joint_extremes_and_balance() {
        let ds = manifest(40, 2);
        let both_biased = [
            CompositionSpec::new("disc_color", ratio("1:0")),
            CompositionSpec::new("tag_color", ratio("1:0")),
        ];
        let split = compose_joint_split(&ds, &both_biased, 30, 0.25, 2).unwrap();
        assert_eq!(split.train_counts["plus/red/green"], 30);
        assert_eq!(split.train_counts["plus/red/yellow"], 0);
        assert_eq!(split.train_counts["plus/blue/green"], 0);
        assert_eq!(split.train_counts["ring/blue/yellow"], 30);

        let balanced = [
            CompositionSpec::new("disc_color", ratio("1:1")),
            CompositionSpec::new("tag_color", ratio("1:1")),
        ];
        let split = compose_joint_split(&ds, &balanced, 28, 0.25, 2).unwrap();
        assert!(split.train_counts.values().all(|&n| n == 7));
    }

    #[test]
    fn joint_mixed_biases_only_first_attribute() {
        // Counted from the emitted split: attribute 1 fully biased, attribute 2
        // exactly balanced within each attribute-1 instance.
        let ds = manifest(40, 2);
        let mixed = [
            CompositionSpec::new("disc_color", ratio("1:0")),
            CompositionSpec::new("tag_color", ratio("1:1")),
        ];
        let split = compose_joint_split(&ds, &mixed, 30, 0.25, 2).unwrap();
        assert_eq!(split.train_counts["plus/red/green"], 15);
        assert_eq!(split.train_counts["plus/red/yellow"], 15);
        assert_eq!(split.train_counts["plus/blue/green"], 0);
        assert_eq!(split.train_counts["plus/blue/yellow"], 0);
        assert_eq!(split.train_counts["ring/blue/green"], 15);
        assert_eq!(split.train_counts["ring/blue/yellow"], 15);
        assert_eq!(counts_for(&split, &ds, 0, 1), [15, 15]);
    }

    #[test]
    fn joint_rounding_keeps_marginals_tight() {
        // 3:1 with a balanced second attribute on an odd-producing total.
        let counts =
            allocate_class_counts(300, &[ratio("3:1").fractions(0), ratio("1:1").fractions(0)]).unwrap();
        let n: Vec<usize> = counts.iter().map(|c| c.1).collect();
        assert_eq!(n.iter().sum::<usize>(), 300);
        assert_eq!(n[0] + n[1], 225);
        assert_eq!(n[0] + n[2], 150);
    }

    #[test]
    fn joint_infeasible_suggests_allocation() {
        let ds = manifest(8, 2);
        let both = [
            CompositionSpec::new("disc_color", ratio("1:0")),
            CompositionSpec::new("tag_color", ratio("1:0")),
        ];
        match compose_joint_split(&ds, &both, 10, 0.25, 2).unwrap_err() {
            Error::InfeasibleJoint { suggestion, .. } => {
                let total: usize = suggestion.iter().map(|s| s.1).sum();
                assert_eq!(total, 10);
                assert_eq!(suggestion[0], ("plus/red/green".to_string(), 6));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn joint_requires_two_attributes() {
        let ds = manifest(8, 1);
        assert!(compose_joint_split(&ds, &[], 4, 0.25, 1).is_err());
    }

    #[test]
    fn swapping_labels_mirrors_a_balanced_split() {
        let ds = manifest(24, 1);
        let split =
            compose_split(&ds, &CompositionSpec::new("disc_color", ratio("1:1")), 18, 0.25, 1).unwrap();
        let c0 = counts_for(&split, &ds, 0, 0);
        let c1 = counts_for(&split, &ds, 1, 0);
        assert_eq!(c0, [9, 9]);
        assert_eq!([c0[1], c0[0]], c0);
        assert_eq!(c1, [9, 9]);
    }

    #[test]
    fn same_seed_same_split() {
        let ds = manifest(20, 2);
        let c = CompositionSpec::new("tag_color", ratio("3:1"));
        assert_eq!(
            compose_split(&ds, &c, 20, 0.25, 5).unwrap(),
            compose_split(&ds, &c, 20, 0.25, 5).unwrap()
        );
    }
}
