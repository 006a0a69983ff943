//! Two-operand Einstein-summation contractions.
//!
//! A spec such as `"bmzh,bmh->bmz"` names one letter per axis. Letters shared
//! by both operands and the output are batch axes, letters shared by both
//! operands but absent from the output are summed, and letters present in
//! exactly one operand and the output are free axes. Every contraction is
//! lowered to a batched matrix product:
//!
//! ```text
//! a[batch, a_free, summed] x b[batch, summed, b_free] -> out[batch, a_free, b_free]
//! ```
//!
//! Letters that appear in a single operand only (implicit reductions) and
//! repeated letters within one operand (diagonals) are rejected.

use std::mem::MaybeUninit;

use crate::error::{AutodiffError, Result};

use crate::tensor::{strides, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractSpec {
    a: Vec<char>,
    b: Vec<char>,
    out: Vec<char>,
    text: String,
}

impl ContractSpec {
    /// The same contraction with index `c` dropped from every term.
    fn without_letter(&self, c: char) -> Self {
        let strip = |t: &[char]| -> Vec<char> { t.iter().copied().filter(|&x| x != c).collect() };
        let (a, b, out) = (strip(&self.a), strip(&self.b), strip(&self.out));
        let text = format!(
            "{},{}->{}",
            a.iter().collect::<String>(),
            b.iter().collect::<String>(),
            out.iter().collect::<String>()
        );
        Self { a, b, out, text }
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let err = |reason: &str| AutodiffError::ContractSpec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let (lhs, out) = spec.split_once("->").ok_or_else(|| err("missing `->`"))?;
        let (a, b) = lhs.split_once(',').ok_or_else(|| err("expected two operands"))?;
        let parse_part = |s: &str| -> Result<Vec<char>> {
            let chars: Vec<char> = s.trim().chars().collect();
            if chars.iter().any(|c| !c.is_ascii_alphabetic()) {
                return Err(err("indices must be ascii letters"));
            }
            for (i, c) in chars.iter().enumerate() {
                if chars[..i].contains(c) {
                    return Err(err("repeated index within one term"));
                }
            }
            Ok(chars)
        };
        let (a, b, out) = (parse_part(a)?, parse_part(b)?, parse_part(out)?);
        for c in &out {
            if !a.contains(c) && !b.contains(c) {
                return Err(err("output index missing from both operands"));
            }
        }
        for c in a.iter().chain(&b) {
            let in_a = a.contains(c);
            let in_b = b.contains(c);
            if !(in_a && in_b) && !out.contains(c) {
                return Err(err("index summed within a single operand"));
            }
        }
        Ok(Self {
            a,
            b,
            out,
            text: spec.to_string(),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Spec of the gradient w.r.t. the first operand: `out,b->a`.
    pub(crate) fn grad_a(&self) -> Self {
        Self::from_parts(self.out.clone(), self.b.clone(), self.a.clone())
    }

    /// Spec of the gradient w.r.t. the second operand: `out,a->b`.
    pub(crate) fn grad_b(&self) -> Self {
        Self::from_parts(self.out.clone(), self.a.clone(), self.b.clone())
    }

    fn from_parts(a: Vec<char>, b: Vec<char>, out: Vec<char>) -> Self {
        let s = |v: &[char]| v.iter().collect::<String>();
        let text = format!("{},{}->{}", s(&a), s(&b), s(&out));
        Self { a, b, out, text }
    }

    /// Output shape, validating that shared letters have equal extents.
    pub fn output_shape(&self, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |reason: String| AutodiffError::ContractSpec {
            spec: self.text.clone(),
            reason,
        };
        if a.len() != self.a.len() || b.len() != self.b.len() {
            return Err(mismatch(format!(
                "operand ranks {} and {} do not match the spec",
                a.len(),
                b.len()
            )));
        }
        let dim = |c: char| -> Result<usize> {
            let da = self.a.iter().position(|&x| x == c).map(|i| a[i]);
            let db = self.b.iter().position(|&x| x == c).map(|i| b[i]);
            match (da, db) {
                (Some(x), Some(y)) if x != y => Err(mismatch(format!(
                    "index `{c}` has extent {x} in the first operand and {y} in the second"
                ))),
                (Some(x), _) | (None, Some(x)) => Ok(x),
                (None, None) => unreachable!("validated in parse"),
            }
        };
        for &c in self.a.iter().chain(&self.b) {
            dim(c)?;
        }
        self.out.iter().map(|&c| dim(c)).collect()
    }
}

/// Evaluates `spec` on two tensors.
pub fn contract(spec: &ContractSpec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = spec.output_shape(a.shape(), b.shape())?;
    let total: usize = out_shape.iter().product();
    let mut out: Vec<f64> = Vec::with_capacity(total);
    contract_into(
        spec,
        (a.data(), a.shape()),
        (b.data(), b.shape()),
        &out_shape,
        &mut out.spare_capacity_mut()[..total],
    )?;
    // SAFETY: `contract_into` initialises every element of the slice.
    unsafe { out.set_len(total) };
    Tensor::new(out_shape, out)
}

type Operand<'a> = (&'a [f64], &'a [usize]);

/// Writes the contraction into `out` (row-major `out_shape`), initialising
/// every element.
fn contract_into(
    spec: &ContractSpec,
    (a, a_shape): Operand<'_>,
    (b, b_shape): Operand<'_>,
    out_shape: &[usize],
    out: &mut [MaybeUninit<f64>],
) -> Result<()> {
    let in_a = |c: &char| spec.a.contains(c);
    let in_b = |c: &char| spec.b.contains(c);
    let in_out = |c: &char| spec.out.contains(c);
    let batch: Vec<char> = spec.out.iter().copied().filter(|c| in_a(c) && in_b(c)).collect();
    let a_free: Vec<char> = spec.out.iter().copied().filter(|c| in_a(c) && !in_b(c)).collect();
    let b_free: Vec<char> = spec.out.iter().copied().filter(|c| in_b(c) && !in_a(c)).collect();
    let summed: Vec<char> = spec.a.iter().copied().filter(|c| in_b(c) && !in_out(c)).collect();

    let pos = |term: &[char], c: char| term.iter().position(|&x| x == c).unwrap();
    let extent = |term: &[char], shape: &[usize], letters: &[char]| -> usize {
        letters.iter().map(|&c| shape[pos(term, c)]).product()
    };

    let n_batch = extent(&spec.a, a_shape, &batch);
    let m = extent(&spec.a, a_shape, &a_free);
    let k = extent(&spec.a, a_shape, &summed);
    let n = extent(&spec.b, b_shape, &b_free);

    let a_groups = [&batch[..], &a_free[..], &summed[..]];
    let b_groups = [&batch[..], &summed[..], &b_free[..]];
    let out_groups = [&batch[..], &a_free[..], &b_free[..]];
    let a_view = group_strides(&spec.a, a_shape, a_groups);
    let b_view = group_strides(&spec.b, b_shape, b_groups);
    let o_view = group_strides(&spec.out, out_shape, out_groups);

    if a_view.is_none() || b_view.is_none() || o_view.is_none() {
        // A leading output axis owned by one operand (where it is also
        // leading) can be peeled off: each slice is an independent, often
        // permutation-free, contraction written to a contiguous block.
        if let Some(&c) = spec.out.first() {
            let lead_a = spec.a.first() == Some(&c) && !in_b(&c);
            let lead_b = spec.b.first() == Some(&c) && !in_a(&c);
            if (lead_a || lead_b) && out_shape[0] > 0 {
                let sub = spec.without_letter(c);
                let o_block = out.len() / out_shape[0];
                for i in 0..out_shape[0] {
                    let o = &mut out[i * o_block..(i + 1) * o_block];
                    if lead_a {
                        let blk = a.len() / a_shape[0];
                        let a_i = (&a[i * blk..(i + 1) * blk], &a_shape[1..]);
                        contract_into(&sub, a_i, (b, b_shape), &out_shape[1..], o)?;
                    } else {
                        let blk = b.len() / b_shape[0];
                        let b_i = (&b[i * blk..(i + 1) * blk], &b_shape[1..]);
                        contract_into(&sub, (a, a_shape), b_i, &out_shape[1..], o)?;
                    }
                }
                return Ok(());
            }
        }
    }

    let a_owned;
    let (a_data, a_st) = match a_view {
        Some(st) => (a, st),
        None => {
            let t = Tensor::new(a_shape.to_vec(), a.to_vec())?;
            a_owned = t.permuted(&canonical_axes(&spec.a, a_groups))?;
            (a_owned.data(), [(m * k) as isize, k as isize, 1])
        }
    };
    let b_owned;
    let (b_data, b_st) = match b_view {
        Some(st) => (b, st),
        None => {
            let t = Tensor::new(b_shape.to_vec(), b.to_vec())?;
            b_owned = t.permuted(&canonical_axes(&spec.b, b_groups))?;
            (b_owned.data(), [(k * n) as isize, n as isize, 1])
        }
    };
    let a = Strided { data: a_data, st: a_st };
    let b = Strided { data: b_data, st: b_st };
    let dims = [n_batch, m, k, n];

    match o_view {
        Some(o_st) => batched_matmul(a, b, out, o_st, dims),
        None => {
            let natural: Vec<char> = batch.iter().chain(&a_free).chain(&b_free).copied().collect();
            let natural_shape: Vec<usize> = natural.iter().map(|c| out_shape[pos(&spec.out, *c)]).collect();
            let mut tmp: Vec<f64> = Vec::with_capacity(out.len());
            batched_matmul(
                a,
                b,
                &mut tmp.spare_capacity_mut()[..out.len()],
                [(m * n) as isize, n as isize, 1],
                dims,
            );
            // SAFETY: `batched_matmul` initialises the whole slice.
            unsafe { tmp.set_len(out.len()) };
            // `to_out[i]` is the natural axis feeding output axis `i`
            let to_out: Vec<usize> = spec.out.iter().map(|&c| pos(&natural, c)).collect();
            let result = Tensor::new(natural_shape, tmp)?.permuted(&to_out)?;
            for (o, x) in out.iter_mut().zip(result.data()) {
                o.write(*x);
            }
        }
    }
    Ok(())
}

/// Strides of a `(batch, row, col)` view of `term` when each group of
/// letters occupies consecutive axes in order; `None` otherwise.
fn group_strides(term: &[char], shape: &[usize], groups: [&[char]; 3]) -> Option<[isize; 3]> {
    let st = strides(shape);
    let mut out = [0isize; 3];
    for (g, letters) in groups.iter().enumerate() {
        let Some(&last) = letters.last() else {
            continue;
        };
        let first_pos = term.iter().position(|&x| x == letters[0])?;
        for (i, &c) in letters.iter().enumerate() {
            if term.get(first_pos + i) != Some(&c) {
                return None;
            }
        }
        let last_pos = first_pos + letters.len() - 1;
        debug_assert_eq!(term[last_pos], last);
        out[g] = st[last_pos] as isize;
    }
    Some(out)
}

fn canonical_axes(term: &[char], groups: [&[char]; 3]) -> Vec<usize> {
    groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|c| term.iter().position(|x| x == c).unwrap())
        .collect()
}

#[derive(Clone, Copy)]
struct Strided<'a> {
    data: &'a [f64],
    st: [isize; 3],
}

/// `out[b] = a[b] (m x k) * b[b] (k x n)` for every batch entry, all three
/// operands addressed through `(batch, row, col)` strides. The output view
/// must cover `out` exactly; every element is initialised on return.
fn batched_matmul(a: Strided<'_>, b: Strided<'_>, out: &mut [MaybeUninit<f64>], o_st: [isize; 3], dims: [usize; 4]) {
    let [batch, m, k, n] = dims;
    let small = m * n * k < 512 || n == 1 || m == 1 || k == 0;
    // Both kernels overwrite every element they address when k > 0; only an
    // empty sum or a view that misses elements needs an explicit fill.
    if k == 0 || out.len() != batch * m * n {
        for o in out.iter_mut() {
            o.write(0.0);
        }
    }
    if batch == 0 || m == 0 || n == 0 || k == 0 {
        return;
    }
    let check = |data_len: usize, st: [isize; 3], ext: [usize; 3]| {
        let last: isize = st.iter().zip(ext).map(|(s, e)| s * (e as isize - 1)).sum();
        assert!(st.iter().all(|s| *s >= 0) && (last as usize) < data_len.max(1));
    };
    check(a.data.len(), a.st, [batch, m, k]);
    check(b.data.len(), b.st, [batch, k, n]);
    check(out.len(), o_st, [batch, m, n]);
    if small {
        for i in 0..batch as isize {
            small_matmul(a, b, out, [i * a.st[0], i * b.st[0], i * o_st[0]], o_st, [m, k, n]);
        }
        return;
    }
    // dgemm with beta = 0 never reads C, so it may start uninitialised.
    let out_ptr = out.as_mut_ptr().cast::<f64>();
    for i in 0..batch as isize {
        // SAFETY: the bounds checks above cover every addressed element of
        // all three operands, and strides are non-negative.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr().offset(i * a.st[0]),
                a.st[1],
                a.st[2],
                b.data.as_ptr().offset(i * b.st[0]),
                b.st[1],
                b.st[2],
                0.0,
                out_ptr.offset(i * o_st[0]),
                o_st[1],
                o_st[2],
            );
        }
    }
}

/// Loop kernel for tiny or vector-shaped products; overwrites the addressed
/// elements of `out`. Requires `k > 0`.
fn small_matmul(
    a: Strided<'_>,
    b: Strided<'_>,
    out: &mut [MaybeUninit<f64>],
    off: [isize; 3],
    o_st: [isize; 3],
    dims: [usize; 3],
) {
    let [m, k, n] = dims;
    let [a_off, b_off, o_off] = off;
    let (ad, bd) = (a.data, b.data);
    if n == 1 {
        for r in 0..m as isize {
            let a_row = a_off + r * a.st[1];
            let acc = if a.st[2] == 1 && b.st[1] == 1 {
                let x = &ad[a_row as usize..a_row as usize + k];
                let y = &bd[b_off as usize..b_off as usize + k];
                x.iter().zip(y).map(|(p, q)| p * q).sum()
            } else {
                (0..k as isize)
                    .map(|j| ad[(a_row + j * a.st[2]) as usize] * bd[(b_off + j * b.st[1]) as usize])
                    .sum()
            };
            out[(o_off + r * o_st[1]) as usize].write(acc);
        }
        return;
    }
    let rows_contiguous = b.st[2] == 1 && o_st[2] == 1;
    for r in 0..m as isize {
        let o_row = o_off + r * o_st[1];
        for j in 0..k as isize {
            let x = ad[(a_off + r * a.st[1] + j * a.st[2]) as usize];
            let b_row = b_off + j * b.st[1];
            if rows_contiguous {
                let dst = &mut out[o_row as usize..o_row as usize + n];
                let src = &bd[b_row as usize..b_row as usize + n];
                if j == 0 {
                    dst.iter_mut().zip(src).for_each(|(o, y)| {
                        o.write(x * y);
                    });
                } else {
                    // SAFETY: written by the j == 0 pass.
                    dst.iter_mut()
                        .zip(src)
                        .for_each(|(o, y)| unsafe { *o.assume_init_mut() += x * y });
                }
            } else {
                for c in 0..n as isize {
                    let o = &mut out[(o_row + c * o_st[2]) as usize];
                    let term = x * bd[(b_row + c * b.st[2]) as usize];
                    if j == 0 {
                        o.write(term);
                    } else {
                        // SAFETY: written by the j == 0 pass.
                        unsafe { *o.assume_init_mut() += term };
                    }
                }
            }
        }
    }
}
