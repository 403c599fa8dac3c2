//! Splicing prompt rows into an embedded token sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Layout;
use crate::tensor::{Scalar, Tape, Var};

/// Where the `t` prompt rows go relative to the special tokens.
///
/// | position | single sentence          | sentence pair                  |
/// |----------|--------------------------|--------------------------------|
/// | `Pos0`   | after `[CLS]`            | after `[CLS]`                  |
/// | `Pos1`   | after `s1`, before `[EOS]` | after `s1`, before `[SEP]`   |
/// | `Pos2`   | not allowed              | after `[SEP]`                  |
/// | `Pos3`   | not allowed              | after `s2`, before `[EOS]`     |
/// | `Pos4`   | after `[EOS]`            | after `[EOS]`                  |
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PromptPosition {
    #[default]
    Pos0,
    Pos1,
    Pos2,
    Pos3,
    Pos4,
}

impl TryFrom<u8> for PromptPosition {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Ok(match v {
            0 => Self::Pos0,
            1 => Self::Pos1,
            2 => Self::Pos2,
            3 => Self::Pos3,
            4 => Self::Pos4,
            _ => return Err(format!("prompt position must be 0..=4, got {v}")),
        })
    }
}

impl From<PromptPosition> for u8 {
    fn from(p: PromptPosition) -> u8 {
        p as u8
    }
}

/// Row index at which the first prompt row lands in the spliced sequence.
pub fn insertion_index(layout: Layout, position: PromptPosition) -> Result<usize> {
    use PromptPosition::*;
    match layout {
        Layout::Single { s1_len } => match position {
            Pos0 => Ok(1),
            Pos1 => Ok(s1_len + 1),
            Pos4 => Ok(s1_len + 2),
            Pos2 | Pos3 => Err(Error::Config(format!(
                "prompt position {} needs a sentence pair",
                u8::from(position)
            ))),
        },
        Layout::Pair { s1_len, s2_len } => Ok(match position {
            Pos0 => 1,
            Pos1 => s1_len + 1,
            Pos2 => s1_len + 2,
            Pos3 => s1_len + s2_len + 2,
            Pos4 => s1_len + s2_len + 3,
        }),
    }
}

/// Inserts `prompt` (`[t×d]`) into `embedded` (`[L×d]`) before row `index`.
/// An empty prompt returns `embedded` unchanged.
pub fn assemble_input<T: Scalar>(tape: &mut Tape<T>, embedded: Var, prompt: Var, index: usize) -> Result<Var> {
    let (len, d) = tape.value(embedded).dims2("assemble_input")?;
    let (t, pd) = tape.value(prompt).dims2("assemble_input")?;
    if t == 0 {
        return Ok(embedded);
    }
    if pd != d {
        return Err(Error::Dimension {
            op: "assemble_input",
            lhs: vec![len, d],
            rhs: vec![t, pd],
        });
    }
    if index > len {
        return Err(Error::Index {
            what: "prompt insertion",
            index,
            len,
        });
    }
    let mut parts = Vec::with_capacity(3);
    if index > 0 {
        parts.push(tape.slice_rows(embedded, 0, index)?);
    }
    parts.push(prompt);
    if index < len {
        parts.push(tape.slice_rows(embedded, index, len - index)?);
    }
    tape.concat_rows(&parts)
}

/// Replaces rows `index..index+t` of `h` with `prompt`.
pub(crate) fn overwrite_rows<T: Scalar>(tape: &mut Tape<T>, h: Var, prompt: Var, index: usize) -> Result<Var> {
    let (len, _) = tape.value(h).dims2("overwrite_rows")?;
    let (t, _) = tape.value(prompt).dims2("overwrite_rows")?;
    if t == 0 {
        return Ok(h);
    }
    if index + t > len {
        return Err(Error::Index {
            what: "prompt overwrite",
            index: index + t,
            len,
        });
    }
    let mut parts = Vec::with_capacity(3);
    if index > 0 {
        parts.push(tape.slice_rows(h, 0, index)?);
    }
    parts.push(prompt);
    if index + t < len {
        parts.push(tape.slice_rows(h, index + t, len - index - t)?);
    }
    tape.concat_rows(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tokenizer::{CLS, EOS, SEP};
    use crate::tensor::Tensor;

    /// Embeds each id as a one-row `[id, 0]` and prompt `k` as `[-1-k, 1]`,
    /// splices, then decodes the row order back into labels.
    fn order(ids: &[usize], layout: Layout, t: usize, pos: PromptPosition) -> Vec<String> {
        let mut tape = Tape::<f64>::new();
        let emb = Tensor::from_fn(&[ids.len(), 2], |i| if i % 2 == 0 { ids[i / 2] as f64 } else { 0.0 });
        let prm = Tensor::from_fn(&[t, 2], |i| if i % 2 == 0 { -1.0 - (i / 2) as f64 } else { 1.0 });
        let e = tape.constant(emb);
        let p = tape.constant(prm);
        let idx = insertion_index(layout, pos).unwrap();
        let out = assemble_input(&mut tape, e, p, idx).unwrap();
        let v = tape.value(out);
        (0..v.shape()[0])
            .map(|r| {
                if v.at2(r, 1) == 1.0 {
                    format!("p{}", (-v.at2(r, 0)) as usize)
                } else {
                    match v.at2(r, 0) as usize {
                        CLS => "[CLS]".into(),
                        SEP => "[SEP]".into(),
                        EOS => "[EOS]".into(),
                        10 => "a".into(),
                        11 => "b".into(),
                        x => x.to_string(),
                    }
                }
            })
            .collect()
    }

    #[test]
    fn single_pos0_after_cls() {
        let got = order(&[CLS, 10, 11, EOS], Layout::Single { s1_len: 2 }, 2, PromptPosition::Pos0);
        assert_eq!(got, ["[CLS]", "p1", "p2", "a", "b", "[EOS]"]);
    }

    #[test]
    fn pair_pos2_after_sep() {
        let got = order(&[CLS, 10, SEP, 11, EOS], Layout::Pair { s1_len: 1, s2_len: 1 }, 1, PromptPosition::Pos2);
        assert_eq!(got, ["[CLS]", "a", "[SEP]", "p1", "b", "[EOS]"]);
    }

    #[test]
    fn every_pair_position() {
        let ids = [CLS, 10, SEP, 11, EOS];
        let layout = Layout::Pair { s1_len: 1, s2_len: 1 };
        let expect: [&[&str]; 5] = [
            &["[CLS]", "p1", "a", "[SEP]", "b", "[EOS]"],
            &["[CLS]", "a", "p1", "[SEP]", "b", "[EOS]"],
            &["[CLS]", "a", "[SEP]", "p1", "b", "[EOS]"],
            &["[CLS]", "a", "[SEP]", "b", "p1", "[EOS]"],
            &["[CLS]", "a", "[SEP]", "b", "[EOS]", "p1"],
        ];
        for (k, want) in expect.iter().enumerate() {
            let pos = PromptPosition::try_from(k as u8).unwrap();
            assert_eq!(order(&ids, layout, 1, pos), *want, "position {k}");
        }
    }

    #[test]
    fn single_positions_and_rejections() {
        let ids = [CLS, 10, 11, EOS];
        let layout = Layout::Single { s1_len: 2 };
        assert_eq!(order(&ids, layout, 1, PromptPosition::Pos1), ["[CLS]", "a", "b", "p1", "[EOS]"]);
        assert_eq!(order(&ids, layout, 1, PromptPosition::Pos4), ["[CLS]", "a", "b", "[EOS]", "p1"]);
        for pos in [PromptPosition::Pos2, PromptPosition::Pos3] {
            assert!(matches!(insertion_index(layout, pos), Err(Error::Config(_))));
        }
    }

    #[test]
    fn empty_prompt_is_identity() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let p = tape.constant(Tensor::zeros(&[0, 2]));
        let out = assemble_input(&mut tape, e, p, 1).unwrap();
        assert_eq!(tape.value(out), tape.value(e));
    }

    #[test]
    fn overwrite_keeps_length() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_fn(&[4, 1], |i| i as f64));
        let p = tape.constant(Tensor::full(&[2, 1], 9.0));
        let out = overwrite_rows(&mut tape, h, p, 1).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 9.0, 9.0, 3.0]);
        assert!(overwrite_rows(&mut tape, h, p, 3).is_err());
    }

    #[test]
    fn position_serde_as_integer() {
        assert_eq!(serde_json::to_string(&PromptPosition::Pos3).unwrap(), "3");
        assert_eq!(serde_json::from_str::<PromptPosition>("4").unwrap(), PromptPosition::Pos4);
        assert!(serde_json::from_str::<PromptPosition>("5").is_err());
    }
}
