use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Distance between the label vector and the student output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDistance {
    #[default]
    CrossEntropy,
}

/// Distance between the teacher and student outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherDistance {
    #[default]
    Mse,
}

/// `(1 - beta) * G(labels, s) + beta * H(t, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdLossConfig {
    pub beta: f64,
    pub g_kind: LabelDistance,
    pub h_kind: TeacherDistance,
}

impl KdLossConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidParams(format!("beta must lie in [0, 1], got {beta}")));
        }
        Ok(Self { beta, g_kind: LabelDistance::CrossEntropy, h_kind: TeacherDistance::Mse })
    }
}

impl Default for KdLossConfig {
    fn default() -> Self {
        Self { beta: 0.35, g_kind: LabelDistance::CrossEntropy, h_kind: TeacherDistance::Mse }
    }
}

/// Ground truth as class indices or as one-hot (or soft) label rows.
#[derive(Debug, Clone, Copy)]
pub enum Labels<'a> {
    Classes(&'a [usize]),
    OneHot(&'a Tensor),
}

impl Labels<'_> {
    fn rows(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::OneHot(t) => t.rows(),
        }
    }
}

/// KD loss on probability vectors (rows of `student` and `teacher` are
/// softmax outputs). G is the mean cross entropy, H the mean squared
/// difference over all entries.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, labels: Labels<'_>, cfg: &KdLossConfig) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape {
            layer: "kd_loss".into(),
            message: format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape()),
        });
    }
    let rows = student.rows();
    let classes = student.row_len();
    if labels.rows() != rows {
        return Err(Error::Shape {
            layer: "kd_loss".into(),
            message: format!("{} label rows for {rows} outputs", labels.rows()),
        });
    }
    let mut g = 0.0;
    for r in 0..rows {
        let s = student.row(r);
        g += match labels {
            Labels::Classes(c) => {
                let class = c[r];
                if class >= classes {
                    return Err(Error::Shape { layer: "kd_loss".into(), message: format!("label {class} out of range") });
                }
                -s[class].ln()
            }
            Labels::OneHot(t) => {
                if t.row_len() != classes {
                    return Err(Error::Shape { layer: "kd_loss".into(), message: "label width differs".into() });
                }
                -t.row(r).iter().zip(s).filter(|(l, _)| **l != 0.0).map(|(l, p)| l * p.ln()).sum::<f64>()
            }
        };
    }
    g /= rows as f64;
    let h = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / student.len() as f64;
    Ok((1.0 - cfg.beta) * g + cfg.beta * h)
}

/// The same objective recorded on a tape from student logits, so it can be
/// differentiated. G uses a log-sum-exp cross entropy; H compares
/// `softmax(student_logits)` with the constant `teacher_probs`, so no
/// gradient ever reaches the teacher.
pub fn kd_loss_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_probs: &Tensor,
    labels: &[usize],
    cfg: &KdLossConfig,
) -> Var {
    let g = tape.cross_entropy(student_logits, labels);
    let probs = tape.softmax(student_logits);
    let h = tape.mse(probs, teacher_probs);
    let g = tape.scale(g, 1.0 - cfg.beta);
    let h = tape.scale(h, cfg.beta);
    tape.add(g, h)
}
