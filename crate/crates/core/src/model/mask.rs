//! Attention visibility masks. `true` = visible, `false` = masked; masked
//! positions receive exactly zero attention weight (see
//! [`crate::tape::Tape::softmax_rows`]).

use std::rc::Rc;

use super::MaskMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Source and target positions jointly.
    Full,
    /// Source positions only; no target columns exist.
    Stage1,
    /// Alias of `Full`: the second stage processes the joint stream.
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub visible: Vec<bool>,
}

impl AttentionMask {
    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.cols + col]
    }

    pub fn to_vis(&self) -> Rc<Vec<bool>> {
        Rc::new(self.visible.clone())
    }
}

/// Build the self-attention mask for a concatenated (source, target) stream.
///
/// * causal: (i, j) visible iff j <= i over the whole stream.
/// * prefix: source rows see the whole source block; target rows see all
///   source positions plus target positions up to themselves.
/// * stage1: restricted to the source block (bidirectional under prefix,
///   lower-triangular under causal).
pub fn build_mask(mode: MaskMode, source_len: usize, target_len: usize, stage: Stage) -> AttentionMask {
    let (s, t) = match stage {
        Stage::Stage1 => (source_len, 0),
        Stage::Full | Stage::Stage2 => (source_len, target_len),
    };
    let n = s + t;
    let mut visible = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = match mode {
                MaskMode::Causal => j <= i,
                MaskMode::Prefix => {
                    if i < s {
                        j < s
                    } else {
                        j < s || j <= i
                    }
                }
            };
            visible[i * n + j] = v;
        }
    }
    AttentionMask {
        rows: n,
        cols: n,
        visible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_is_lower_triangular() {
        let m = build_mask(MaskMode::Causal, 3, 0, Stage::Full);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.is_visible(i, j), j <= i);
            }
        }
    }

    #[test]
    fn prefix_rows_match_definition() {
        let m = build_mask(MaskMode::Prefix, 2, 2, Stage::Full);
        let expected = [
            [true, true, false, false],
            [true, true, false, false],
            [true, true, true, false],
            [true, true, true, true],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.is_visible(i, j), expected[i][j], "({i},{j})");
            }
        }
    }

    #[test]
    fn stage1_has_no_target_columns() {
        let m = build_mask(MaskMode::Prefix, 3, 5, Stage::Stage1);
        assert_eq!(m.rows, 3);
        assert_eq!(m.cols, 3);
        assert!(m.visible.iter().all(|&v| v));

        let mc = build_mask(MaskMode::Causal, 3, 5, Stage::Stage1);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(mc.is_visible(i, j), j <= i);
            }
        }
    }

    #[test]
    fn prefix_and_causal_agree_for_single_source_position() {
        let p = build_mask(MaskMode::Prefix, 1, 0, Stage::Stage1);
        let c = build_mask(MaskMode::Causal, 1, 0, Stage::Stage1);
        assert_eq!(p, c);
    }
}
