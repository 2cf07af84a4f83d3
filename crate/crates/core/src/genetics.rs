//! Evolutionary distances between aligned HA sequences and fixed-size
//! case features derived from them.
//!
//! Distances follow the Kimura two-parameter substitution model, which
//! separates transitions (A<->G, C<->T) from transversions. Sites
//! containing `N` or a gap are pairwise-deleted, the standard phylogenetic
//! convention.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// One pre-aligned nucleotide sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSequence {
    pub id: String,
    /// Bases over {A, C, G, T, N, -}; uppercase.
    pub bases: Vec<u8>,
}

impl AlignedSequence {
    pub fn new(id: impl Into<String>, bases: &str) -> Result<Self> {
        let id = id.into();
        let bases: Vec<u8> = bases.bytes().map(|b| b.to_ascii_uppercase()).collect();
        if bases.is_empty() {
            return Err(Error::Data(format!("sequence {id}: empty bases")));
        }
        if let Some(&bad) = bases
            .iter()
            .find(|b| !matches!(b, b'A' | b'C' | b'G' | b'T' | b'N' | b'-'))
        {
            return Err(Error::Data(format!(
                "sequence {id}: invalid base '{}'",
                bad as char
            )));
        }
        Ok(AlignedSequence { id, bases })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }
}

/// Symmetric matrix of pairwise distances in substitutions/site.
#[derive(Debug, Clone)]
pub struct GeneticDistanceMatrix {
    pub ids: Vec<String>,
    pub d: DMatrix<f64>,
}

/// Like [`GeneticDistanceMatrix`] but saturated pairs are recorded as
/// missing instead of failing the whole batch. Used when building genetic
/// edges, where undefined pairs simply contribute no edge.
#[derive(Debug, Clone)]
pub struct PartialDistanceMatrix {
    pub ids: Vec<String>,
    pub d: Vec<Vec<Option<f64>>>,
}

fn is_comparable(b: u8) -> bool {
    matches!(b, b'A' | b'C' | b'G' | b'T')
}

fn is_transition(a: u8, b: u8) -> bool {
    matches!((a, b), (b'A', b'G') | (b'G', b'A') | (b'C', b'T') | (b'T', b'C'))
}

/// Observed transition/transversion proportions over comparable sites.
fn site_proportions(s1: &AlignedSequence, s2: &AlignedSequence) -> Result<(f64, f64)> {
    if s1.len() != s2.len() {
        return Err(Error::Data(format!(
            "sequences {} ({} bp) and {} ({} bp) are not aligned to equal length",
            s1.id,
            s1.len(),
            s2.id,
            s2.len()
        )));
    }
    let mut comparable = 0usize;
    let mut transitions = 0usize;
    let mut transversions = 0usize;
    for (&a, &b) in s1.bases.iter().zip(&s2.bases) {
        if !is_comparable(a) || !is_comparable(b) {
            continue;
        }
        comparable += 1;
        if a == b {
            continue;
        }
        if is_transition(a, b) {
            transitions += 1;
        } else {
            transversions += 1;
        }
    }
    if comparable == 0 {
        return Err(Error::Data(format!(
            "sequences {} and {} share no comparable sites",
            s1.id, s2.id
        )));
    }
    Ok((
        transitions as f64 / comparable as f64,
        transversions as f64 / comparable as f64,
    ))
}

/// K80 distance: d = -1/2 ln(1 - 2P - Q) - 1/4 ln(1 - 2Q).
pub fn k80_distance(s1: &AlignedSequence, s2: &AlignedSequence) -> Result<f64> {
    let (p, q) = site_proportions(s1, s2)?;
    let a = 1.0 - 2.0 * p - q;
    let b = 1.0 - 2.0 * q;
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::Saturation {
            id_a: s1.id.clone(),
            id_b: s2.id.clone(),
            p,
            q,
        });
    }
    Ok(-0.5 * a.ln() - 0.25 * b.ln())
}

/// All-pairs K80 distances. Any saturated pair fails the batch with an
/// error naming the pair.
pub fn pairwise_distances(batch: &[AlignedSequence]) -> Result<GeneticDistanceMatrix> {
    let partial = pairwise_distances_lenient(batch)?;
    let m = partial.ids.len();
    let mut d = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            match partial.d[i][j] {
                Some(v) => {
                    d[(i, j)] = v;
                    d[(j, i)] = v;
                }
                None => {
                    // Re-run the single pair to surface the tagged error.
                    return Err(k80_distance(&batch[i], &batch[j]).unwrap_err());
                }
            }
        }
    }
    Ok(GeneticDistanceMatrix {
        ids: partial.ids,
        d,
    })
}

/// All-pairs K80 distances with saturated or incomparable pairs left as
/// `None`. Alignment-length mismatches still fail the whole batch.
pub fn pairwise_distances_lenient(batch: &[AlignedSequence]) -> Result<PartialDistanceMatrix> {
    if batch.is_empty() {
        return Err(Error::Data("empty sequence batch".into()));
    }
    let len0 = batch[0].len();
    if let Some(bad) = batch.iter().find(|s| s.len() != len0) {
        return Err(Error::Data(format!(
            "ragged alignment: sequence {} has length {} but batch length is {len0}",
            bad.id,
            bad.len()
        )));
    }
    let m = batch.len();
    let rows: Vec<Vec<Option<f64>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![None; m];
            row[i] = Some(0.0);
            for (j, other) in batch.iter().enumerate().skip(i + 1) {
                row[j] = k80_distance(&batch[i], other).ok();
            }
            row
        })
        .collect();
    // Mirror the upper triangle.
    let mut d = rows;
    for i in 0..m {
        for j in 0..i {
            d[i][j] = d[j][i];
        }
    }
    Ok(PartialDistanceMatrix {
        ids: batch.iter().map(|s| s.id.clone()).collect(),
        d,
    })
}

/// Laplacian-eigenmap features from a distance matrix.
///
/// Affinity is exp(-d_ij / dbar) with dbar the mean off-diagonal distance
/// (1 when all distances are zero). Columns are the eigenvectors of the
/// `dim` smallest nonzero Laplacian eigenvalues, unit-normalized, sign
/// fixed so the largest-magnitude entry is positive. Rows are per-case
/// features in batch order.
///
/// A batch of identical sequences has no nonzero spectrum to embed; every
/// case then gets the same constant feature row.
pub fn spectral_embed(dm: &GeneticDistanceMatrix, dim: usize) -> Result<DMatrix<f64>> {
    let m = dm.ids.len();
    if dim == 0 {
        return Err(Error::dim("spectral_embed", "dim must be >= 1"));
    }
    if dim >= m {
        return Err(Error::dim(
            "spectral_embed",
            format!("dim={dim} must be smaller than batch size {m}"),
        ));
    }
    let mut off_sum = 0.0;
    let mut off_cnt = 0usize;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                off_sum += dm.d[(i, j)];
                off_cnt += 1;
            }
        }
    }
    let dbar = if off_cnt == 0 || off_sum == 0.0 {
        1.0
    } else {
        off_sum / off_cnt as f64
    };
    if off_sum == 0.0 {
        let v = 1.0 / (m as f64).sqrt();
        return Ok(DMatrix::from_element(m, dim, v));
    }

    let mut w = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                w[(i, j)] = (-dm.d[(i, j)] / dbar).exp();
            }
        }
    }
    let mut lap = -w.clone();
    for i in 0..m {
        lap[(i, i)] = w.row(i).sum();
    }
    let eig = lap
        .try_symmetric_eigen(1e-13, 10_000)
        .ok_or_else(|| Error::Numerical("spectral embedding eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("non-finite eigenvalue")
    });
    let tol = 1e-9 * (m as f64).max(1.0);
    let nonzero: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > tol)
        .collect();
    if nonzero.len() < dim {
        return Err(Error::Numerical(format!(
            "only {} nonzero Laplacian eigenvalues available for dim={dim}",
            nonzero.len()
        )));
    }
    let mut out = DMatrix::zeros(m, dim);
    for (c, &src) in nonzero.iter().take(dim).enumerate() {
        let mut col: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut col {
                *v /= norm;
            }
        }
        // Deterministic sign: largest-magnitude entry positive.
        let mut lead = 0usize;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            for v in &mut col {
                *v = -*v;
            }
        }
        for i in 0..m {
            out[(i, c)] = col[i];
        }
    }
    Ok(out)
}

/// Parse the `id<TAB>bases` one-record-per-line sequence format.
pub fn parse_sequences(text: &str) -> Result<Vec<AlignedSequence>> {
    let mut out = Vec::new();
    let mut len: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, bases) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "sequences line {}: expected `id<TAB>bases`",
                lineno + 1
            ))
        })?;
        let seq = AlignedSequence::new(id.trim(), bases.trim())?;
        if let Some(l) = len {
            if seq.len() != l {
                return Err(Error::Data(format!(
                    "sequences line {}: length {} differs from batch length {l}",
                    lineno + 1,
                    seq.len()
                )));
            }
        } else {
            len = Some(seq.len());
        }
        if out.iter().any(|s: &AlignedSequence| s.id == seq.id) {
            return Err(Error::Data(format!(
                "sequences line {}: duplicate id {}",
                lineno + 1,
                seq.id
            )));
        }
        out.push(seq);
    }
    if out.is_empty() {
        return Err(Error::Data("no sequences found".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, bases: &str) -> AlignedSequence {
        AlignedSequence::new(id, bases).unwrap()
    }

    #[test]
    fn identical_sequences_distance_zero() {
        let a = seq("a", "AAAA");
        let b = seq("b", "AAAA");
        assert_eq!(k80_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn single_transition_closed_form() {
        // One A<->G change over 4 sites: P = 1/4, Q = 0, d = ln(2)/2.
        let a = seq("a", "AAGG");
        let b = seq("b", "AGGG");
        let d = k80_distance(&a, &b).unwrap();
        assert!((d - 0.346574).abs() < 1e-6, "{d}");
        assert!((d - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn p_and_q_closed_form_value() {
        // 20 sites: 2 transitions, 1 transversion -> P = 0.1, Q = 0.05.
        let a = seq("a", "AAAACCCCGGGGTTTTACGT");
        let b = seq("b", "GAAATCCCGGGGTTTTCCGT");
        let (p, q) = site_proportions(&a, &b).unwrap();
        assert!((p - 0.1).abs() < 1e-15);
        assert!((q - 0.05).abs() < 1e-15);
        let d = k80_distance(&a, &b).unwrap();
        assert!((d - 0.170181).abs() < 1e-6, "{d}");
    }

    #[test]
    fn sites_with_gaps_are_pairwise_deleted() {
        let a = seq("a", "AANG-C");
        let b = seq("b", "AA-GTC");
        // Comparable sites: positions 0, 1, 5 -> identical.
        assert_eq!(k80_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn saturation_is_an_error() {
        let a = seq("a", "AAAA");
        let b = seq("b", "GGGG");
        // P = 1, Q = 0 -> 1 - 2P - Q < 0.
        match k80_distance(&a, &b) {
            Err(Error::Saturation { id_a, id_b, .. }) => {
                assert_eq!(id_a, "a");
                assert_eq!(id_b, "b");
            }
            other => panic!("expected saturation, got {other:?}"),
        }
    }

    #[test]
    fn no_comparable_sites_is_an_error() {
        let a = seq("a", "NN--");
        let b = seq("b", "AACC");
        assert!(k80_distance(&a, &b).is_err());
    }

    #[test]
    fn symmetry() {
        let a = seq("a", "ACGTACGTAA");
        let b = seq("b", "ACGTACGGTA");
        assert_eq!(
            k80_distance(&a, &b).unwrap(),
            k80_distance(&b, &a).unwrap()
        );
    }

    #[test]
    fn batch_of_one_is_zero_matrix() {
        let dm = pairwise_distances(&[seq("a", "ACGT")]).unwrap();
        assert_eq!(dm.d, DMatrix::zeros(1, 1));
    }

    #[test]
    fn identical_batch_is_zero_matrix() {
        let batch = vec![seq("a", "ACGT"), seq("b", "ACGT"), seq("c", "ACGT")];
        let dm = pairwise_distances(&batch).unwrap();
        assert_eq!(dm.d, DMatrix::zeros(3, 3));
    }

    #[test]
    fn embed_identical_batch_rows_identical() {
        let batch = vec![seq("a", "ACGT"), seq("b", "ACGT"), seq("c", "ACGT")];
        let dm = pairwise_distances(&batch).unwrap();
        let e = spectral_embed(&dm, 2).unwrap();
        for i in 1..3 {
            for j in 0..2 {
                assert!((e[(i, j)] - e[(0, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_two_rows_opposite() {
        let batch = vec![seq("a", "AAAAAAAA"), seq("b", "AAAAAAGA")];
        let dm = pairwise_distances(&batch).unwrap();
        let e = spectral_embed(&dm, 1).unwrap();
        assert!((e[(0, 0)] + e[(1, 0)]).abs() < 1e-12);
        assert!((e[(0, 0)].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn embed_dim_too_large_rejected() {
        let batch = vec![seq("a", "ACGT"), seq("b", "ACGT")];
        let dm = pairwise_distances(&batch).unwrap();
        assert!(spectral_embed(&dm, 2).is_err());
    }

    #[test]
    fn parse_rejects_ragged_and_duplicates() {
        assert!(parse_sequences("a\tACGT\nb\tACG").is_err());
        assert!(parse_sequences("a\tACGT\na\tACGT").is_err());
        let seqs = parse_sequences("a\tACGT\n\nb\tAAGT\n").unwrap();
        assert_eq!(seqs.len(), 2);
    }
}
