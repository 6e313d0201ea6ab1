//! Small dense helpers shared by the quantity functions.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves a 3×3 system by Gaussian elimination with partial pivoting after
/// symmetric diagonal equilibration. Returns `None` for singular systems.
pub(crate) fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let mut scale = [1.0; 3];
    for i in 0..3 {
        if a[i][i] > 0.0 && a[i][i].is_finite() {
            scale[i] = 1.0 / a[i][i].sqrt();
        }
    }
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = scale[i] * a[i][j] * scale[j];
        }
        m[i][3] = scale[i] * b[i];
    }
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&r, &s| m[r][col].abs().total_cmp(&m[s][col].abs()))
            .unwrap_or(col);
        if m[pivot][col] == 0.0 || !m[pivot][col].is_finite() {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let tail: f64 = (i + 1..3).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][3] - tail) / m[i][i];
    }
    let out = [x[0] * scale[0], x[1] * scale[1], x[2] * scale[2]];
    out.iter().all(|v| v.is_finite()).then_some(out)
}
