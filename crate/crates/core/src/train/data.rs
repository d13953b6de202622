//! Loading manifest items into memory and splitting them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_container, Manifest, Split};
use crate::regression::{scale_mos, AnchorCodec, Target};
use crate::tokenizer::RawVideo;

/// A decoded item with its scaled training target.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub name: String,
    pub dataset: String,
    pub raw_mos: f64,
    pub target: Target,
    pub video: RawVideo,
}

/// Reads the items at `indices`, scaling each MOS with its dataset range.
pub fn load_items(manifest: &Manifest, indices: &[usize], codec: &AnchorCodec) -> Result<Vec<TrainItem>> {
    indices
        .iter()
        .map(|&i| {
            let item = manifest.items.get(i).ok_or(Error::Index {
                what: "manifest item",
                index: i,
                len: manifest.items.len(),
            })?;
            let range = manifest.range_of(&item.dataset)?;
            let video = read_container(manifest.resolve(item))?;
            Ok(TrainItem {
                name: item.path.clone(),
                dataset: item.dataset.clone(),
                raw_mos: item.mos,
                target: Target {
                    score: scale_mos(item.mos, range, codec)?,
                    label: item.label,
                },
                video,
            })
        })
        .collect()
}

/// Seeded 80/20 split of item indices, stratified by dataset. Each
/// dataset contributes `round(0.2·n)` test items.
pub fn split_dataset(manifest: &Manifest, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if manifest.items.len() < 5 {
        return Err(Error::Input(format!(
            "need at least 5 items to split, got {}",
            manifest.items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut names: Vec<&str> = manifest.items.iter().map(|i| i.dataset.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        let mut members: Vec<usize> = (0..manifest.items.len())
            .filter(|&i| manifest.items[i].dataset == name)
            .collect();
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * 0.2).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Uses the manifest's own split tags when every item has one, otherwise
/// falls back to [`split_dataset`].
pub fn manifest_split(manifest: &Manifest, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !manifest.items.is_empty() && manifest.items.iter().all(|i| i.split.is_some()) {
        let pick = |s: Split| {
            (0..manifest.items.len())
                .filter(|&i| manifest.items[i].split == Some(s))
                .collect::<Vec<_>>()
        };
        return Ok((pick(Split::Train), pick(Split::Test)));
    }
    split_dataset(manifest, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ManifestItem;
    use crate::regression::MosRange;

    fn manifest(per_dataset: &[usize]) -> Manifest {
        let mut m = Manifest::default();
        for (d, &n) in per_dataset.iter().enumerate() {
            let name = format!("d{d}");
            m.datasets.insert(name.clone(), MosRange::new(0.0, 1.0).unwrap());
            for i in 0..n {
                m.items.push(ManifestItem {
                    path: format!("{name}_{i}"),
                    mos: 0.5,
                    dataset: name.clone(),
                    split: None,
                    label: None,
                });
            }
        }
        m
    }

    #[test]
    fn ten_items_split_eight_two() {
        let (tr, te) = split_dataset(&manifest(&[10]), 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert!(tr.iter().all(|i| !te.contains(i)));
        assert_eq!(split_dataset(&manifest(&[10]), 3).unwrap(), (tr, te));
    }

    #[test]
    fn stratified_per_dataset() {
        let m = manifest(&[10, 10]);
        let (tr, te) = split_dataset(&m, 9).unwrap();
        for d in ["d0", "d1"] {
            let count = |v: &[usize]| v.iter().filter(|&&i| m.items[i].dataset == d).count();
            assert_eq!((count(&tr), count(&te)), (8, 2));
        }
    }

    #[test]
    fn too_few_items() {
        assert!(split_dataset(&manifest(&[4]), 0).is_err());
    }
}
