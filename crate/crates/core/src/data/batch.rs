use std::sync::mpsc;

use rand::seq::SliceRandom;

use super::augment::rescale;
use super::{augment, resize, AugmentParams, Dataset, Image};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

/// Environment variable capping data-pipeline worker threads.
pub const THREADS_ENV: &str = "LESIONFORGE_THREADS";

/// Batches buffered ahead of the consumer.
const QUEUE_DEPTH: usize = 2;

/// Worker count from `LESIONFORGE_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                log::warn!("ignoring invalid {THREADS_ENV}={v:?}");
                available
            }
        },
        Err(_) => available,
    }
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub image_size: usize,
    pub shuffle: bool,
    pub augment: AugmentParams,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[N, 3, S, S]`, values in `[0, 1]` after rescaling.
    pub x: Tensor<f32>,
    /// `[N, 2]` one-hot labels.
    pub y: Tensor<f32>,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn labels(&self) -> Vec<usize> {
        self.y
            .data()
            .chunks(2)
            .map(|r| usize::from(r[1] == 1.0))
            .collect()
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    let mut y = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Label(format!("label {l} outside {classes} classes")));
        }
        y[i * classes + l] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), classes], y)
}

/// Dataset indices in the order epoch `epoch` visits them.
fn epoch_order(n: usize, cfg: &BatchConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(&mut rng::stream(cfg.seed, &[purpose::SHUFFLE, epoch as u64]));
    }
    order
}

/// Decoded, resized and augmented CHW pixels of one sample. The augmentation
/// stream is keyed by `(seed, epoch, index)` only.
fn prepare(ds: &Dataset, index: usize, cfg: &BatchConfig, epoch: usize) -> Result<Vec<f32>> {
    let img = resize(&ds.samples[index].load()?, cfg.image_size)?;
    let mut r = rng::stream(cfg.seed, &[purpose::AUGMENT, epoch as u64, index as u64]);
    Ok(to_chw(&augment(&img, &cfg.augment, &mut r)))
}

fn to_chw(img: &Image) -> Vec<f32> {
    let plane = img.width() * img.height();
    let mut chw = vec![0.0; 3 * plane];
    for (p, px) in img.pixels().chunks(3).enumerate() {
        for c in 0..3 {
            chw[c * plane + p] = px[c];
        }
    }
    chw
}

/// A single `[1, 3, size, size]` input prepared exactly as evaluation batches are:
/// resized, rescaled by 1/255, no augmentation.
pub fn input_tensor(img: &Image, size: usize) -> Result<Tensor<f32>> {
    let img = rescale(&resize(img, size)?, AugmentParams::rescale_only().rescale);
    Tensor::from_vec(&[1, 3, size, size], to_chw(&img))
}

fn build_batch(ds: &Dataset, indices: &[usize], cfg: &BatchConfig, epoch: usize) -> Result<Batch> {
    let workers = cfg.workers.clamp(1, indices.len().max(1));
    let rows: Vec<Result<Vec<f32>>> = if workers == 1 {
        indices.iter().map(|&i| prepare(ds, i, cfg, epoch)).collect()
    } else {
        let chunk = indices.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&i| prepare(ds, i, cfg, epoch)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("data worker panicked"))
                .collect()
        })
    };
    let s = cfg.image_size;
    let mut x = Vec::with_capacity(indices.len() * 3 * s * s);
    for row in rows {
        x.extend(row?);
    }
    let labels: Vec<usize> = indices.iter().map(|&i| ds.samples[i].label).collect();
    Ok(Batch {
        x: Tensor::from_vec(&[indices.len(), 3, s, s], x)?,
        y: one_hot(&labels, 2)?,
        indices: indices.to_vec(),
    })
}

/// Streams the `ceil(n / batch_size)` batches of one epoch into `f`.
///
/// With more than one worker a producer thread assembles batches into a bounded
/// queue; batch contents never depend on the worker count.
pub fn for_each_batch<F>(ds: &Dataset, cfg: &BatchConfig, epoch: usize, mut f: F) -> Result<()>
where
    F: FnMut(Batch) -> Result<()>,
{
    if ds.is_empty() {
        return Err(Error::Input("cannot stream batches from an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    cfg.augment.validate()?;
    let order = epoch_order(ds.len(), cfg, epoch);
    if cfg.workers <= 1 {
        for idx in order.chunks(cfg.batch_size) {
            f(build_batch(ds, idx, cfg, epoch)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(QUEUE_DEPTH);
        let order = &order;
        s.spawn(move || {
            for idx in order.chunks(cfg.batch_size) {
                let b = build_batch(ds, idx, cfg, epoch);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        for b in rx {
            f(b?)?;
        }
        Ok(())
    })
}

pub fn collect_batches(ds: &Dataset, cfg: &BatchConfig, epoch: usize) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    for_each_batch(ds, cfg, epoch, |b| {
        out.push(b);
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> Dataset {
        Dataset::from_images((0..n).map(|i| (Image::filled(4, 4, [i as f32; 3]).unwrap(), i % 2))).unwrap()
    }

    fn cfg(batch: usize, shuffle: bool, augment: AugmentParams, workers: usize) -> BatchConfig {
        BatchConfig {
            batch_size: batch,
            image_size: 4,
            shuffle,
            augment,
            seed: 11,
            workers,
        }
    }

    #[test]
    fn batch_sizes() {
        let b = collect_batches(&ds(5), &cfg(2, true, AugmentParams::default(), 1), 0).unwrap();
        assert_eq!(b.iter().map(|b| b.indices.len()).collect::<Vec<_>>(), [2, 2, 1]);
        assert_eq!(b[2].x.shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn unshuffled_plain_order() {
        let b = collect_batches(&ds(5), &cfg(2, false, AugmentParams::rescale_only(), 1), 0).unwrap();
        let order: Vec<usize> = b.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(order, [0, 1, 2, 3, 4]);
        assert_eq!(b[1].x.data()[0], (2.0 * (1.0 / 255.0f64)) as f32);
        assert_eq!(b[0].labels(), [0, 1]);
    }

    #[test]
    fn rows_are_one_hot_and_in_range() {
        for b in collect_batches(&ds(7), &cfg(3, true, AugmentParams::default(), 1), 2).unwrap() {
            crate::optim::validate_one_hot(&b.y).unwrap();
            assert!(b.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn shuffle_differs_across_epochs() {
        let c = cfg(10, true, AugmentParams::rescale_only(), 1);
        let e0 = collect_batches(&ds(10), &c, 0).unwrap();
        let e1 = collect_batches(&ds(10), &c, 1).unwrap();
        assert_ne!(e0[0].indices, e1[0].indices);
        let mut sorted = e0[0].indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn worker_count_does_not_change_contents() {
        let data = crate::data::synth_dataset(8, 16, 3).unwrap();
        let one = collect_batches(&data, &BatchConfig { image_size: 16, ..cfg(5, true, AugmentParams::default(), 1) }, 1).unwrap();
        let four = collect_batches(&data, &BatchConfig { image_size: 16, ..cfg(5, true, AugmentParams::default(), 4) }, 1).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn single_input_matches_evaluation_batch() {
        let data = crate::data::synth_dataset(2, 16, 5).unwrap();
        let b = collect_batches(&data, &BatchConfig { image_size: 16, ..cfg(4, false, AugmentParams::rescale_only(), 1) }, 0).unwrap();
        let img = data.samples[1].load().unwrap();
        let x = input_tensor(&img, 16).unwrap();
        assert_eq!(x.data(), &b[0].x.data()[3 * 256..2 * 3 * 256]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            collect_batches(&Dataset::default(), &cfg(2, false, AugmentParams::default(), 1), 0),
            Err(Error::Input(_))
        ));
        assert!(collect_batches(&ds(2), &cfg(0, false, AugmentParams::default(), 1), 0).is_err());
        assert!(one_hot(&[2], 2).is_err());
    }
}
