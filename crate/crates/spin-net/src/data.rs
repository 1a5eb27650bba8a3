//! Dataset ingestion and generation: mixed-type CSV tables, genomic K-mer
//! tokenization, a synthetic recombination-mosaic genotype generator, and
//! slice batching for training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{AttrKind, AttrSpec, Role, SchemaSpec, Value};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column {column:?}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// In-memory table bound to a schema. Missing input values are `None`
/// (mask-flagged downstream); missing targets are rejected at load.
#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub schema: SchemaSpec,
    pub rows: Vec<Vec<Option<Value>>>,
    pub split: Vec<Split>,
    /// Per attribute: `(mean, std)` from the train split, continuous only.
    pub stats: Vec<Option<(f64, f64)>>,
}

impl TabularDataset {
    pub fn new(schema: SchemaSpec, rows: Vec<Vec<Option<Value>>>) -> Self {
        let n = rows.len();
        let d = schema.d();
        TabularDataset {
            schema,
            rows,
            split: vec![Split::Train; n],
            stats: vec![None; d],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Shuffled split assignment; fractions apply to the row count.
    pub fn assign_splits(&mut self, val_frac: f64, test_frac: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&val_frac)
            || !(0.0..1.0).contains(&test_frac)
            || val_frac + test_frac >= 1.0
        {
            return Err(DataError::Invalid(format!(
                "split fractions val={val_frac}, test={test_frac} must leave a train share"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * val_frac).round() as usize;
        let n_test = (self.len() as f64 * test_frac).round() as usize;
        for (pos, &i) in order.iter().enumerate() {
            self.split[i] = if pos < n_val {
                Split::Val
            } else if pos < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
        Ok(())
    }

    /// Materialize rows for batching. Missing inputs become placeholder
    /// values that callers must keep masked and never supervise; the
    /// second return flags them row-major.
    pub fn gather(&self, idx: &[usize]) -> (Vec<Vec<Value>>, Vec<bool>) {
        let d = self.schema.d();
        let mut values = Vec::with_capacity(idx.len());
        let mut missing = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            let row: Vec<Value> = self.rows[r]
                .iter()
                .zip(&self.schema.attributes)
                .map(|(v, spec)| match v {
                    Some(v) => {
                        missing.push(false);
                        *v
                    }
                    None => {
                        missing.push(true);
                        match spec.kind {
                            AttrKind::Categorical { .. } => Value::Cat(0),
                            AttrKind::Continuous => Value::Cont(0.0),
                        }
                    }
                })
                .collect();
            values.push(row);
        }
        (values, missing)
    }

    /// Standardize every continuous attribute to zero mean, unit variance
    /// using train-split statistics only; applied to all splits in place.
    /// Near-constant columns are left unscaled.
    pub fn standardize(&mut self) {
        let train = self.indices_of(Split::Train);
        for (a, spec) in self.schema.attributes.clone().iter().enumerate() {
            if spec.kind != AttrKind::Continuous {
                continue;
            }
            let vals: Vec<f64> = train
                .iter()
                .filter_map(|&r| match self.rows[r][a] {
                    Some(Value::Cont(x)) => Some(x),
                    _ => None,
                })
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            self.stats[a] = Some((mean, std));
            for row in &mut self.rows {
                if let Some(Value::Cont(x)) = &mut row[a] {
                    *x = (*x - mean) / std;
                }
            }
        }
    }
}

/// Load a CSV with a header row matching the schema's attribute names.
/// Empty categorical/continuous cells are missing: inputs become mask
/// flags, targets are an error.
pub fn load_csv(path: &Path, schema: &SchemaSpec) -> Result<TabularDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut col_of = Vec::with_capacity(schema.d());
    for a in &schema.attributes {
        let idx = headers
            .iter()
            .position(|h| h == a.name)
            .ok_or_else(|| DataError::MissingColumn(a.name.clone()))?;
        col_of.push(idx);
    }
    for h in headers.iter() {
        if !schema.attributes.iter().any(|a| a.name == h) {
            return Err(DataError::UnknownColumn(h.to_string()));
        }
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(schema.d());
        for (a, spec) in schema.attributes.iter().enumerate() {
            let raw = record.get(col_of[a]).unwrap_or("").trim();
            if raw.is_empty() {
                if spec.role == Role::Target {
                    return Err(DataError::Parse {
                        row: r,
                        column: spec.name.clone(),
                        message: "missing target value".into(),
                    });
                }
                row.push(None);
                continue;
            }
            let value = match spec.kind {
                AttrKind::Categorical { vocab } => {
                    let v: usize = raw.parse().map_err(|_| DataError::Parse {
                        row: r,
                        column: spec.name.clone(),
                        message: format!("{raw:?} is not a category index"),
                    })?;
                    if v >= vocab {
                        return Err(DataError::Parse {
                            row: r,
                            column: spec.name.clone(),
                            message: format!("index {v} outside vocab {vocab}"),
                        });
                    }
                    Value::Cat(v)
                }
                AttrKind::Continuous => {
                    let x: f64 = raw.parse().map_err(|_| DataError::Parse {
                        row: r,
                        column: spec.name.clone(),
                        message: format!("{raw:?} is not a number"),
                    })?;
                    if !x.is_finite() {
                        return Err(DataError::Parse {
                            row: r,
                            column: spec.name.clone(),
                            message: "non-finite value".into(),
                        });
                    }
                    Value::Cont(x)
                }
            };
            row.push(Some(value));
        }
        rows.push(row);
    }
    Ok(TabularDataset::new(schema.clone(), rows))
}

/// Consecutive non-overlapping K-blocks, first site as the most
/// significant bit: K=5, `[1,0,1,1,0]` is 0b10110 = 22.
pub fn kmerize(haplotype: &[u8], k: usize) -> Result<Vec<usize>> {
    if k == 0 || haplotype.len() % k != 0 {
        return Err(DataError::Invalid(format!(
            "sequence length {} is not a multiple of K={k}",
            haplotype.len()
        )));
    }
    haplotype
        .chunks_exact(k)
        .map(|block| {
            let mut token = 0usize;
            for &site in block {
                if site > 1 {
                    return Err(DataError::Invalid(format!(
                        "site value {site} is not biallelic"
                    )));
                }
                token = (token << 1) | site as usize;
            }
            Ok(token)
        })
        .collect()
}

/// Exact inverse of [`kmerize`].
pub fn dekmerize(tokens: &[usize], k: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.len() * k);
    for &t in tokens {
        for bit in (0..k).rev() {
            out.push(((t >> bit) & 1) as u8);
        }
    }
    out
}

/// Haplotype rows over biallelic sites.
#[derive(Debug, Clone)]
pub struct GenomicPanel {
    pub haplotypes: Vec<Vec<u8>>,
    pub sites: usize,
}

/// Recombination-mosaic generator settings.
#[derive(Debug, Clone)]
pub struct MosaicGenConfig {
    pub founders: usize,
    pub sites: usize,
    /// Per-site founder allele frequency.
    pub freqs: Vec<f64>,
    /// Per-site probability of switching to a uniformly random founder.
    pub rho: f64,
    /// Per-site copy-error probability.
    pub mu: f64,
    pub n: usize,
    pub seed: u64,
}

impl MosaicGenConfig {
    /// Desk-scale defaults used by the evaluation suite.
    pub fn desk_scale(n: usize, seed: u64) -> Self {
        MosaicGenConfig {
            founders: 16,
            sites: 250,
            freqs: vec![0.5; 250],
            rho: 0.02,
            mu: 0.001,
            n,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.founders < 2 {
            return Err(DataError::Invalid(format!(
                "need at least 2 founders, got {}",
                self.founders
            )));
        }
        if self.freqs.len() != self.sites {
            return Err(DataError::Invalid(format!(
                "{} allele frequencies for {} sites",
                self.freqs.len(),
                self.sites
            )));
        }
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.rho) || !ok(self.mu) || !self.freqs.iter().all(|&p| ok(p)) {
            return Err(DataError::Invalid("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Founders plus the generated panel.
#[derive(Debug, Clone)]
pub struct MosaicOutput {
    pub panel: GenomicPanel,
    pub founders: Vec<Vec<u8>>,
}

/// Sample founders i.i.d. per site, then build each individual by copying
/// a founder and switching to a uniformly random founder with probability
/// rho at each site; every copied allele flips with probability mu.
pub fn generate_mosaic(cfg: &MosaicGenConfig) -> Result<MosaicOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let founders: Vec<Vec<u8>> = (0..cfg.founders)
        .map(|_| {
            cfg.freqs
                .iter()
                .map(|&p| u8::from(rng.gen::<f64>() < p))
                .collect()
        })
        .collect();
    let haplotypes = (0..cfg.n)
        .map(|_| {
            let mut src = rng.gen_range(0..cfg.founders);
            (0..cfg.sites)
                .map(|s| {
                    if rng.gen::<f64>() < cfg.rho {
                        src = rng.gen_range(0..cfg.founders);
                    }
                    let mut allele = founders[src][s];
                    if rng.gen::<f64>() < cfg.mu {
                        allele ^= 1;
                    }
                    allele
                })
                .collect()
        })
        .collect();
    Ok(MosaicOutput {
        panel: GenomicPanel {
            haplotypes,
            sites: cfg.sites,
        },
        founders,
    })
}

/// Spatial arrangement of input vs target site windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputationLayout {
    /// Alternating blocks of 3 input K-mers and 2 target K-mers.
    Interleaved,
    /// All input sites first, then all target sites.
    Flanking,
}

/// Turn a panel into a K-mer imputation table: `n_input` observed sites
/// and `n_target` sites to predict, each K-block a `2^K`-way categorical.
/// Defaults (150 input and 100 target sites at K=5) give 30 input and 20
/// target attributes.
pub fn make_imputation_task(
    panel: &GenomicPanel,
    k: usize,
    n_input: usize,
    n_target: usize,
    layout: ImputationLayout,
) -> Result<TabularDataset> {
    if k == 0 || n_input % k != 0 || n_target % k != 0 {
        return Err(DataError::Invalid(format!(
            "window sizes {n_input}/{n_target} must be multiples of K={k}"
        )));
    }
    if n_input + n_target > panel.sites {
        return Err(DataError::Invalid(format!(
            "windows need {} sites, panel has {}",
            n_input + n_target,
            panel.sites
        )));
    }
    let in_blocks = n_input / k;
    let tgt_blocks = n_target / k;
    // per-block roles over the first (in_blocks + tgt_blocks) K-blocks
    let roles: Vec<Role> = match layout {
        ImputationLayout::Flanking => {
            let mut r = vec![Role::Input; in_blocks];
            r.extend(vec![Role::Target; tgt_blocks]);
            r
        }
        ImputationLayout::Interleaved => {
            // ratio-preserving alternation: lay target blocks out evenly
            // among input blocks
            let total = in_blocks + tgt_blocks;
            let mut r = Vec::with_capacity(total);
            let (mut used_in, mut used_tgt) = (0usize, 0usize);
            for i in 0..total {
                let want_tgt = ((i + 1) * tgt_blocks) / total;
                if want_tgt > used_tgt && used_tgt < tgt_blocks {
                    r.push(Role::Target);
                    used_tgt += 1;
                } else if used_in < in_blocks {
                    r.push(Role::Input);
                    used_in += 1;
                } else {
                    r.push(Role::Target);
                    used_tgt += 1;
                }
            }
            r
        }
    };
    let vocab = 1usize << k;
    let attributes = roles
        .iter()
        .enumerate()
        .map(|(i, &role)| AttrSpec {
            name: match role {
                Role::Input => format!("kmer_in_{i}"),
                Role::Target => format!("kmer_tgt_{i}"),
            },
            kind: AttrKind::Categorical { vocab },
            role,
        })
        .collect();
    let schema = SchemaSpec { attributes };
    let total_sites = n_input + n_target;
    let rows = panel
        .haplotypes
        .iter()
        .map(|h| {
            let tokens = kmerize(&h[..total_sites], k)?;
            Ok(tokens.into_iter().map(|t| Some(Value::Cat(t))).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TabularDataset::new(schema, rows))
}

/// Row indices of one training slice.
#[derive(Debug, Clone)]
pub struct Slice {
    /// Labels stay visible to the encoder.
    pub context: Vec<usize>,
    /// Labels are masked; the loss is measured here.
    pub query: Vec<usize>,
}

impl Slice {
    pub fn len(&self) -> usize {
        self.context.len() + self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_rows(&self) -> Vec<usize> {
        let mut v = self.context.clone();
        v.extend_from_slice(&self.query);
        v
    }
}

/// Shuffle `indices` into slices of `slice_size` (a trailing remainder
/// smaller than 2 merges into the previous slice), then split each slice
/// into context and query rows at `label_rate`, keeping at least one of
/// each.
pub fn slice_batches(
    indices: &[usize],
    slice_size: usize,
    label_rate: f64,
    seed: u64,
) -> Result<Vec<Slice>> {
    if slice_size < 2 {
        return Err(DataError::Invalid(format!(
            "slice size {slice_size} < 2 cannot hold context and query rows"
        )));
    }
    if indices.len() < 2 {
        return Err(DataError::Invalid(format!(
            "{} rows cannot form a context/query slice",
            indices.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = indices.to_vec();
    order.shuffle(&mut rng);
    let mut bounds: Vec<usize> = (0..order.len() / slice_size).map(|i| (i + 1) * slice_size).collect();
    match order.len() - bounds.last().copied().unwrap_or(0) {
        0 => {}
        1 => {
            // lone remainder row joins the previous slice
            *bounds.last_mut().expect("slice_size <= len") = order.len();
        }
        _ => bounds.push(order.len()),
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(bounds.len());
    for end in bounds {
        let rows = &order[start..end];
        start = end;
        let mut context = Vec::new();
        let mut query = Vec::new();
        for &r in rows {
            if rng.gen::<f64>() < label_rate {
                query.push(r);
            } else {
                context.push(r);
            }
        }
        if context.is_empty() {
            context.push(query.pop().expect("slice has >= 2 rows"));
        }
        if query.is_empty() {
            query.push(context.pop().expect("slice has >= 2 rows"));
        }
        out.push(Slice { context, query });
    }
    Ok(out)
}
