//! Sinusoidal positional encodings with independent position indices for
//! source and target tokens: in a concatenated decoder-only stream the
//! target block restarts at position zero with its own table.

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

/// Sinusoidal encoding value for a single (position, channel) pair.
fn encoding(pos: usize, channel: usize, d: usize) -> f64 {
    let i = channel / 2;
    let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
    if channel % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Encoding table for `len` positions starting at index 0.
///
/// The `_role` discriminator documents which block the table serves; both
/// roles share the sinusoidal formula and are independent by restarting the
/// position index at the block boundary.
pub fn table<E: Scalar>(_role: Role, len: usize, d: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for ch in 0..d {
            data.push(E::of_f64(encoding(pos, ch, d)));
        }
    }
    Tensor::new(vec![len, d], data).unwrap()
}

/// Encoding for a concatenated (source, target) stream: source positions
/// 0..s with the source table, target positions restarting at 0.
pub fn concat_table<E: Scalar>(source_len: usize, target_len: usize, d: usize) -> Tensor<E> {
    let src = table::<E>(Role::Source, source_len, d);
    let tgt = table::<E>(Role::Target, target_len, d);
    let mut data = src.data;
    data.extend_from_slice(&tgt.data);
    Tensor::new(vec![source_len + target_len, d], data).unwrap()
}
