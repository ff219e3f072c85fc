//! Datasets: synthetic classification data, Dirichlet non-IID partitioning,
//! and small-scale IDX image ingestion.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Result, SimError};
use crate::rng::{self, tag};

/// An immutable classification dataset: `n` rows of `dim` features plus one
/// label per row in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>, // row-major, n * dim
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(SimError::Data("dataset must contain at least one sample".into()));
        }
        if dim == 0 {
            return Err(SimError::Data("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(SimError::Data(format!(
                "feature matrix has {} values, expected {} ({} rows x {} dims)",
                features.len(),
                labels.len() * dim,
                labels.len(),
                dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(SimError::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(SimError::Data("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// New dataset holding copies of the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(SimError::Data(format!(
                    "subset index {i} out of bounds for {} samples",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.dim, self.num_classes)
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Assignment of sample indices to clients.
#[derive(Clone, Debug)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub concentration: f64,
}

impl PartitionPlan {
    pub fn total_samples(&self) -> usize {
        self.assignments.iter().map(|a| a.len()).sum()
    }

    /// Client data-size fractions `|D_k| / |D|`.
    pub fn data_fractions(&self) -> Vec<f64> {
        let total = self.total_samples() as f64;
        self.assignments
            .iter()
            .map(|a| a.len() as f64 / total)
            .collect()
    }
}

/// Gaussian class clusters with seeded means separated by `class_sep`.
/// Class counts are balanced within one sample.
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    n: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(SimError::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if dim == 0 {
        return Err(SimError::Config("feature dimension must be positive".into()));
    }
    if n < num_classes {
        return Err(SimError::Config(format!(
            "need at least {num_classes} samples for {num_classes} classes, got {n}"
        )));
    }
    if !class_sep.is_finite() || class_sep < 0.0 {
        return Err(SimError::Config(format!(
            "class separation must be finite and nonnegative, got {class_sep}"
        )));
    }

    let mut rng = rng::stream(seed, &[tag::DATA]);

    // Means are class_sep times a random unit direction per class.
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mean: Vec<f64> = if norm > 0.0 {
            raw.iter().map(|v| class_sep * v / norm).collect()
        } else {
            let mut e = vec![0.0; dim];
            e[0] = class_sep;
            e
        };
        means.push(mean);
    }

    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        for d in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(means[label][d] + noise);
        }
        labels.push(label);
    }

    Dataset::new(features, labels, dim, num_classes)
}

/// Per-class client proportions drawn as normalized Gamma(concentration, 1)
/// variates, which is the standard symmetric-Dirichlet construction.
fn dirichlet_proportions(
    rng: &mut rand_chacha::ChaCha20Rng,
    concentration: f64,
    k: usize,
) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        // Vanishingly small concentrations can underflow every draw to zero.
        return vec![1.0 / k as f64; k];
    }
    draws.iter().map(|d| d / sum).collect()
}

/// Split integer `count` across proportions using largest remainders, so the
/// counts sum to `count` exactly. Ties go to the lower index.
fn apportion(proportions: &[f64], count: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|p| (p * count as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * count as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders.iter().take(count - assigned) {
        counts[*i] += 1;
    }
    counts
}

/// Non-IID partition: for every class, client shares are drawn from a
/// symmetric Dirichlet with the given concentration. Clients left empty are
/// repaired by moving one sample from the largest client.
pub fn dirichlet_partition(
    data: &Dataset,
    num_clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(SimError::Config("need at least one client".into()));
    }
    if num_clients > data.len() {
        return Err(SimError::Config(format!(
            "cannot split {} samples across {num_clients} clients",
            data.len()
        )));
    }
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(SimError::Config(format!(
            "Dirichlet concentration must be positive, got {concentration}"
        )));
    }

    let mut rng = rng::stream(seed, &[tag::PARTITION]);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];

    for class in 0..data.num_classes() {
        let mut class_indices: Vec<usize> =
            (0..data.len()).filter(|&i| data.label(i) == class).collect();
        if class_indices.is_empty() {
            continue;
        }
        class_indices.shuffle(&mut rng);
        let proportions = dirichlet_proportions(&mut rng, concentration, num_clients);
        let counts = apportion(&proportions, class_indices.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignments[client].extend_from_slice(&class_indices[cursor..cursor + count]);
            cursor += count;
        }
    }

    // Repair: every client must end up with at least one sample.
    loop {
        let Some(empty) = assignments.iter().position(|a| a.is_empty()) else {
            break;
        };
        let largest = assignments
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("at least one client");
        let moved = assignments[largest].pop().expect("largest client nonempty");
        assignments[empty].push(moved);
    }

    Ok(PartitionPlan {
        assignments,
        concentration,
    })
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(SimError::Format(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Load an IDX image/label file pair. Pixels are scaled to `[0, 1]` and each
/// image is flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    if limit == Some(0) {
        return Err(SimError::Data("limit of 0 would produce an empty dataset".into()));
    }

    let image_bytes = fs::read(images_path).map_err(|e| SimError::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| SimError::io(labels_path, e))?;

    let image_magic = read_be_u32(&image_bytes, 0, images_path)?;
    if image_magic != IDX_IMAGE_MAGIC {
        return Err(SimError::Format(format!(
            "{}: bad image magic {image_magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let image_count = read_be_u32(&image_bytes, 4, images_path)? as usize;
    let rows = read_be_u32(&image_bytes, 8, images_path)? as usize;
    let cols = read_be_u32(&image_bytes, 12, images_path)? as usize;

    let label_magic = read_be_u32(&label_bytes, 0, labels_path)?;
    if label_magic != IDX_LABEL_MAGIC {
        return Err(SimError::Format(format!(
            "{}: bad label magic {label_magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let label_count = read_be_u32(&label_bytes, 4, labels_path)? as usize;

    if image_count != label_count {
        return Err(SimError::Format(format!(
            "image/label count mismatch: {image_count} images vs {label_count} labels"
        )));
    }

    let dim = rows * cols;
    if image_bytes.len() != 16 + image_count * dim {
        return Err(SimError::Format(format!(
            "{}: expected {} pixel bytes, found {}",
            images_path.display(),
            image_count * dim,
            image_bytes.len() - 16
        )));
    }
    if label_bytes.len() != 8 + label_count {
        return Err(SimError::Format(format!(
            "{}: expected {label_count} label bytes, found {}",
            labels_path.display(),
            label_bytes.len() - 8
        )));
    }

    let take = limit.map_or(image_count, |l| l.min(image_count));
    let features: Vec<f64> = image_bytes[16..16 + take * dim]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[8..8 + take].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;

    Dataset::new(features, labels, dim, num_classes.max(2))
}

/// Debug export: `feature_0..feature_{d-1},label` rows.
pub fn export_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        SimError::io(path, std::io::Error::other(e))
    })?;
    let mut header: Vec<String> = (0..data.dim()).map(|d| format!("feature_{d}")).collect();
    header.push("label".into());
    writer
        .write_record(&header)
        .and_then(|_| {
            for i in 0..data.len() {
                let mut record: Vec<String> =
                    data.row(i).iter().map(|v| v.to_string()).collect();
                record.push(data.label(i).to_string());
                writer.write_record(&record)?;
            }
            writer.flush()?;
            Ok(())
        })
        .map_err(|e| SimError::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_is_reproducible() {
        let a = gen_synthetic(3, 4, 30, 1.5, 9).unwrap();
        let b = gen_synthetic(3, 4, 30, 1.5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_balances_classes() {
        let data = gen_synthetic(3, 2, 100, 1.0, 1).unwrap();
        let hist = data.class_histogram();
        assert_eq!(hist.iter().sum::<usize>(), 100);
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(matches!(gen_synthetic(1, 4, 10, 1.0, 0), Err(SimError::Config(_))));
        assert!(matches!(gen_synthetic(3, 0, 10, 1.0, 0), Err(SimError::Config(_))));
        assert!(matches!(gen_synthetic(5, 4, 3, 1.0, 0), Err(SimError::Config(_))));
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let data = gen_synthetic(4, 3, 200, 1.0, 3).unwrap();
        let plan = dirichlet_partition(&data, 7, 0.5, 11).unwrap();
        let mut seen = vec![false; data.len()];
        for assignment in &plan.assignments {
            assert!(!assignment.is_empty());
            for &i in assignment {
                assert!(!seen[i], "sample {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn partition_fractions_sum_to_one() {
        let data = gen_synthetic(4, 3, 153, 1.0, 3).unwrap();
        let plan = dirichlet_partition(&data, 9, 0.3, 5).unwrap();
        assert_eq!(plan.total_samples(), data.len());
        let sum: f64 = plan.data_fractions().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partition_rejects_more_clients_than_samples() {
        let data = gen_synthetic(2, 2, 10, 1.0, 0).unwrap();
        assert!(matches!(
            dirichlet_partition(&data, 11, 1.0, 0),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn huge_concentration_approaches_uniform_split() {
        let data = gen_synthetic(4, 2, 2000, 1.0, 7).unwrap();
        let plan = dirichlet_partition(&data, 10, 1e6, 2).unwrap();
        let global = data.class_histogram();
        let total = data.len() as f64;
        for assignment in &plan.assignments {
            let client = data.subset(assignment).unwrap();
            let hist = client.class_histogram();
            let size = client.len() as f64;
            for (class, &count) in hist.iter().enumerate() {
                let global_frac = global[class] as f64 / total;
                let client_frac = count as f64 / size;
                assert!(
                    (client_frac - global_frac).abs() / global_frac <= 0.2,
                    "class {class} client fraction {client_frac} vs global {global_frac}"
                );
            }
        }
    }

    #[test]
    fn low_concentration_concentrates_mass() {
        // Median across 10 seeds of the worst single-class share per run.
        let data = gen_synthetic(10, 2, 2000, 1.0, 7).unwrap();
        let mut max_shares = Vec::new();
        for seed in 0..10 {
            let plan = dirichlet_partition(&data, 10, 0.1, seed).unwrap();
            let run_max = plan
                .assignments
                .iter()
                .map(|a| {
                    let client = data.subset(a).unwrap();
                    let hist = client.class_histogram();
                    *hist.iter().max().unwrap() as f64 / client.len() as f64
                })
                .fold(0.0f64, f64::max);
            max_shares.push(run_max);
        }
        max_shares.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = (max_shares[4] + max_shares[5]) / 2.0;
        assert!(median > 0.6, "median worst-case class share {median} <= 0.6");
    }

    fn write_idx_fixture(dir: &Path, pixels: &[u8], labels: &[u8], count: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");
        let mut image_bytes = Vec::new();
        image_bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        image_bytes.extend_from_slice(&count.to_be_bytes());
        image_bytes.extend_from_slice(&2u32.to_be_bytes());
        image_bytes.extend_from_slice(&2u32.to_be_bytes());
        image_bytes.extend_from_slice(pixels);
        fs::write(&images, image_bytes).unwrap();
        let mut label_bytes = Vec::new();
        label_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        label_bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        label_bytes.extend_from_slice(labels);
        fs::write(&labels_path, label_bytes).unwrap();
        (images, labels_path)
    }

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [0u8, 1, 128, 255, 10, 20, 30, 40, 255, 255, 0, 0];
        let (images, labels) = write_idx_fixture(dir.path(), &pixels, &[0, 1, 2], 3);
        let data = load_idx(&images, &labels, None).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.dim(), 4);
        assert_eq!(data.row(0), &[0.0, 1.0 / 255.0, 128.0 / 255.0, 1.0]);
        assert_eq!(data.label(2), 2);

        let limited = load_idx(&images, &labels, Some(2)).unwrap();
        assert_eq!(limited.len(), 2);
    }

    #[test]
    fn idx_rejects_zero_limit() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_fixture(dir.path(), &[0; 4], &[0], 1);
        assert!(matches!(load_idx(&images, &labels, Some(0)), Err(SimError::Data(_))));
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_fixture(dir.path(), &[0; 8], &[0, 1, 1], 2);
        assert!(matches!(load_idx(&images, &labels, None), Err(SimError::Format(_))));
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("bad.idx");
        let labels = dir.path().join("labels.idx");
        fs::write(&images, 0x12345678u32.to_be_bytes()).unwrap();
        let mut label_bytes = Vec::new();
        label_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        label_bytes.extend_from_slice(&1u32.to_be_bytes());
        label_bytes.push(0);
        fs::write(&labels, label_bytes).unwrap();
        assert!(matches!(load_idx(&images, &labels, None), Err(SimError::Format(_))));
    }

    #[test]
    fn csv_export_writes_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data = Dataset::new(vec![0.5, 1.5, 2.5, 3.5], vec![0, 1], 2, 2).unwrap();
        export_csv(&data, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("feature_0,feature_1,label"));
        assert_eq!(lines.next(), Some("0.5,1.5,0"));
        assert_eq!(lines.next(), Some("2.5,3.5,1"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn partition_property(
            seed in 0u64..1000,
            num_clients in 1usize..20,
            concentration in 0.05f64..100.0,
            n in 50usize..300,
            classes in 2usize..8,
        ) {
            let data = gen_synthetic(classes, 2, n, 1.0, seed).unwrap();
            let plan = dirichlet_partition(&data, num_clients, concentration, seed).unwrap();
            let mut seen = vec![false; data.len()];
            for assignment in &plan.assignments {
                prop_assert!(!assignment.is_empty());
                for &i in assignment {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }
}
