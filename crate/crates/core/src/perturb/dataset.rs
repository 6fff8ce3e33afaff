use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_pipeline, PerturbError, PerturbPipeline};
use crate::geometry::BinaryCell;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Nominal,
    Fabricated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub nominal_id: u32,
    pub role: Role,
    pub cell: BinaryCell,
}

/// Nominal designs and their (synthetic or real) fabricated counterparts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairedDataset {
    pub records: Vec<Record>,
}

impl PairedDataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(records: Vec<Record>) -> Result<Self, PerturbError> {
        let ds = Self { records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        use std::collections::BTreeMap;
        let mut nominals: BTreeMap<u32, usize> = BTreeMap::new();
        let first = self.records.first().map(|r| &r.cell);
        for rec in &self.records {
            if let Some(f) = first {
                if !rec.cell.same_shape(f) {
                    return Err(PerturbError::InvalidDataset(
                        "records have different resolutions".into(),
                    ));
                }
            }
            if rec.role == Role::Nominal {
                *nominals.entry(rec.nominal_id).or_default() += 1;
            }
        }
        if let Some((id, _)) = nominals.iter().find(|(_, &n)| n != 1) {
            return Err(PerturbError::InvalidDataset(format!(
                "nominal {id} has more than one nominal record"
            )));
        }
        if let Some(rec) = self
            .records
            .iter()
            .find(|r| r.role == Role::Fabricated && !nominals.contains_key(&r.nominal_id))
        {
            return Err(PerturbError::InvalidDataset(format!(
                "fabricated record references unknown nominal {}",
                rec.nominal_id
            )));
        }
        Ok(())
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.records
            .first()
            .map(|r| (r.cell.height(), r.cell.width()))
    }

    /// Nominal records in file order.
    pub fn nominals(&self) -> impl Iterator<Item = (u32, &BinaryCell)> {
        self.records
            .iter()
            .filter(|r| r.role == Role::Nominal)
            .map(|r| (r.nominal_id, &r.cell))
    }

    pub fn nominal(&self, id: u32) -> Option<&BinaryCell> {
        self.records
            .iter()
            .find(|r| r.role == Role::Nominal && r.nominal_id == id)
            .map(|r| &r.cell)
    }

    pub fn fabricated_of(&self, id: u32) -> impl Iterator<Item = &BinaryCell> {
        self.records
            .iter()
            .filter(move |r| r.role == Role::Fabricated && r.nominal_id == id)
            .map(|r| &r.cell)
    }

    pub fn nominal_count(&self) -> usize {
        self.records.iter().filter(|r| r.role == Role::Nominal).count()
    }

    pub fn fabricated_count(&self) -> usize {
        self.records.iter().filter(|r| r.role == Role::Fabricated).count()
    }

    /// Fabricated records per nominal if every nominal has the same count.
    pub fn variants_per_nominal(&self) -> Option<usize> {
        let counts: Vec<usize> = self
            .nominals()
            .map(|(id, _)| self.fabricated_of(id).count())
            .collect();
        match counts.first() {
            Some(&n) if counts.iter().all(|&c| c == n) => Some(n),
            _ => None,
        }
    }

    /// `(nominal, fabricated)` training pairs.
    pub fn pairs(&self) -> Vec<(&BinaryCell, &BinaryCell)> {
        use std::collections::HashMap;
        let nominals: HashMap<u32, &BinaryCell> = self.nominals().collect();
        self.records
            .iter()
            .filter(|r| r.role == Role::Fabricated)
            .map(|r| (nominals[&r.nominal_id], &r.cell))
            .collect()
    }
}

const MAX_VARIANT_ATTEMPTS: u64 = 10;

/// Perturbs `cell` with a stream derived from `(seed, path, attempt)`,
/// resampling all-void or seed-less outcomes.
pub(crate) fn perturb_with_retries(
    cell: &BinaryCell,
    pipe: &PerturbPipeline,
    seed: u64,
    path: &[u64],
) -> Option<BinaryCell> {
    for attempt in 0..MAX_VARIANT_ATTEMPTS {
        let mut full: Vec<u64> = path.to_vec();
        full.push(attempt);
        let mut rng = stream(seed, &full);
        match apply_pipeline(cell, pipe, &mut rng) {
            Ok(out) if out.material_count() > 0 => return Some(out),
            Ok(_) => log::warn!("all-void variant at {path:?} attempt {attempt}, resampling"),
            Err(e) => log::warn!("variant at {path:?} attempt {attempt} failed ({e}), resampling"),
        }
    }
    None
}

/// Generates `variants` synthetic fabricated geometries per nominal.
///
/// Records are ordered nominal by nominal: the nominal record followed by its
/// variants. Variant `v` of nominal `i` uses the stream derived from
/// `(seed, i, v)`, so output does not depend on worker count.
pub fn build_dataset(
    nominals: &[BinaryCell],
    pipe: &PerturbPipeline,
    variants: usize,
    seed: u64,
) -> Result<PairedDataset, PerturbError> {
    pipe.validate()?;
    if variants == 0 {
        return Err(PerturbError::InvalidConfig("variants must be >= 1".into()));
    }
    let Some(first) = nominals.first() else {
        return Err(PerturbError::InvalidConfig("no nominal designs".into()));
    };
    if nominals.iter().any(|n| !n.same_shape(first)) {
        return Err(PerturbError::InvalidDataset(
            "nominal designs have different resolutions".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..nominals.len())
        .flat_map(|i| (0..variants).map(move |v| (i, v)))
        .collect();
    let cells: Vec<Result<BinaryCell, PerturbError>> = jobs
        .par_iter()
        .map(|&(i, v)| {
            perturb_with_retries(&nominals[i], pipe, seed, &[i as u64, v as u64]).ok_or(
                PerturbError::DatasetDegenerate {
                    nominal_id: i as u32,
                },
            )
        })
        .collect();
    let mut records = Vec::with_capacity(nominals.len() * (1 + variants));
    let mut cells = cells.into_iter();
    for (i, nominal) in nominals.iter().enumerate() {
        records.push(Record {
            nominal_id: i as u32,
            role: Role::Nominal,
            cell: nominal.clone(),
        });
        for _ in 0..variants {
            records.push(Record {
                nominal_id: i as u32,
                role: Role::Fabricated,
                cell: cells.next().expect("one result per job")?,
            });
        }
    }
    Ok(PairedDataset { records })
}

/// Spawns `factor` perturbed copies of every fabricated record. Copies follow
/// their source record; nominal records are kept.
pub fn augment_dataset(
    real: &PairedDataset,
    pipe: &PerturbPipeline,
    factor: usize,
    seed: u64,
) -> Result<PairedDataset, PerturbError> {
    pipe.validate()?;
    if factor == 0 {
        return Err(PerturbError::InvalidConfig("augmentation factor must be >= 1".into()));
    }
    let copies: Vec<Option<Vec<BinaryCell>>> = real
        .records
        .par_iter()
        .enumerate()
        .map(|(idx, rec)| match rec.role {
            Role::Nominal => Some(Vec::new()),
            Role::Fabricated => (0..factor)
                .map(|k| perturb_with_retries(&rec.cell, pipe, seed, &[idx as u64, k as u64]))
                .collect(),
        })
        .collect();
    let mut records = Vec::with_capacity(real.records.len() * (1 + factor));
    for (rec, extra) in real.records.iter().zip(copies) {
        let extra = extra.ok_or(PerturbError::DatasetDegenerate {
            nominal_id: rec.nominal_id,
        })?;
        records.push(rec.clone());
        records.extend(extra.into_iter().map(|cell| Record {
            nominal_id: rec.nominal_id,
            role: Role::Fabricated,
            cell,
        }));
    }
    Ok(PairedDataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::FfdConfig;

    fn nominals(count: usize, n: usize) -> Vec<BinaryCell> {
        (0..count)
            .map(|k| {
                BinaryCell::from_fn(n, n, |r, c| {
                    let w = 2 + (k % 3) as i64;
                    (r as i64 - n as i64 / 2).abs() < w || (c as i64 - n as i64 / 2).abs() < w + 1
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn counts_and_grouping() {
        let noms = nominals(3, 16);
        let ds = build_dataset(&noms, &PerturbPipeline::pretrain(FfdConfig { m: 4, sigma: 2.0 }), 5, 1).unwrap();
        assert_eq!(ds.records.len(), 3 * 6);
        assert_eq!(ds.fabricated_count(), 15);
        assert_eq!(ds.variants_per_nominal(), Some(5));
        assert_eq!(ds.pairs().len(), 15);
        ds.validate().unwrap();
    }

    #[test]
    fn empty_pipeline_copies_nominals() {
        let noms = nominals(2, 16);
        let ds = build_dataset(&noms, &PerturbPipeline::identity(), 1, 9).unwrap();
        for (nom, fab) in ds.pairs() {
            assert_eq!(nom, fab);
        }
    }

    #[test]
    fn reproducible_and_order_independent() {
        let noms = nominals(4, 16);
        let pipe = PerturbPipeline::pretrain(FfdConfig { m: 4, sigma: 3.0 });
        let a = build_dataset(&noms, &pipe, 3, 5).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| build_dataset(&noms, &pipe, 3, 5).unwrap());
        assert_eq!(a, b);
        // a subset of nominals reproduces the matching variants
        let c = build_dataset(&noms[..2], &pipe, 3, 5).unwrap();
        assert_eq!(&a.records[..8], &c.records[..]);
    }

    #[test]
    fn degenerate_nominal_is_reported() {
        let void = vec![BinaryCell::filled(8, 8, false).unwrap()];
        let err = build_dataset(&void, &PerturbPipeline::identity(), 2, 0).unwrap_err();
        assert_eq!(err, PerturbError::DatasetDegenerate { nominal_id: 0 });
    }

    #[test]
    fn augmentation_counts() {
        let noms = nominals(2, 16);
        let real = build_dataset(&noms, &PerturbPipeline::pretrain(FfdConfig { m: 4, sigma: 2.0 }), 4, 3).unwrap();
        let aug = augment_dataset(&real, &PerturbPipeline::pretrain(FfdConfig { m: 4, sigma: 1.0 }), 3, 4).unwrap();
        assert_eq!(aug.fabricated_count(), real.fabricated_count() * (1 + 3));
        assert_eq!(aug.nominal_count(), 2);
        aug.validate().unwrap();

        let same = augment_dataset(&real, &PerturbPipeline::identity(), 2, 4).unwrap();
        for id in 0..2 {
            let originals: Vec<_> = real.fabricated_of(id).collect();
            let all: Vec<_> = same.fabricated_of(id).collect();
            for (k, orig) in originals.iter().enumerate() {
                for j in 0..3 {
                    assert_eq!(all[k * 3 + j], *orig);
                }
            }
        }
    }

    #[test]
    fn invalid_datasets_rejected() {
        let cell = BinaryCell::filled(8, 8, true).unwrap();
        let orphan = vec![Record {
            nominal_id: 3,
            role: Role::Fabricated,
            cell: cell.clone(),
        }];
        assert!(PairedDataset::new(orphan).is_err());
        let dup = vec![
            Record { nominal_id: 0, role: Role::Nominal, cell: cell.clone() },
            Record { nominal_id: 0, role: Role::Nominal, cell },
        ];
        assert!(PairedDataset::new(dup).is_err());
    }
}
