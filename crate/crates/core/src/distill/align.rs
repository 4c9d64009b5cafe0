use crate::error::{Error, Result};

/// Uniform ("skip") map from student to teacher representation indices.
/// Index 0 is the embedding output on both sides.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerAlignment {
    /// `(student index, teacher index)`, strictly increasing on both sides.
    pub pairs: Vec<(usize, usize)>,
}

impl LayerAlignment {
    pub fn from_pairs(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Usage("alignment needs at least one pair".into()));
        }
        for w in pairs.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(Error::Usage(format!(
                    "alignment not strictly increasing at {:?} -> {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn student_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.0)
    }

    pub fn teacher_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.1)
    }
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `f(step_s·t) = step_t·t` for `t = 0..=g`, `g = gcd(L_t, L_s)`.
pub fn align_layers(teacher_layers: usize, student_layers: usize) -> Result<LayerAlignment> {
    if student_layers == 0 {
        return Err(Error::Unsupported("student must have at least one layer".into()));
    }
    if student_layers > teacher_layers {
        return Err(Error::Unsupported(format!(
            "student depth {student_layers} exceeds teacher depth {teacher_layers}"
        )));
    }
    let g = gcd(teacher_layers, student_layers);
    let step_t = teacher_layers / g;
    let step_s = student_layers / g;
    Ok(LayerAlignment {
        pairs: (0..=g).map(|t| (step_s * t, step_t * t)).collect(),
    })
}
