//! Action-usage analysis over evaluation rollouts: Pearson correlations
//! between per-episode move-action frequencies.

use super::train::LocRecord;
use crate::geometry::ActionKind;

/// 9x9 Pearson matrix over the move actions, indexed by action encoding.
/// Entries are `None` where a correlation is undefined (fewer than two
/// episodes, or zero variance in either action's frequencies).
pub type CorrelationMatrix = Vec<Vec<Option<f64>>>;

/// Per-episode counts of each move action.
pub fn move_action_frequencies(records: &[LocRecord]) -> Vec<[f64; ActionKind::MOVE_COUNT]> {
    records
        .iter()
        .map(|r| {
            let mut freq = [0.0; ActionKind::MOVE_COUNT];
            for a in &r.actions {
                if a.is_move() {
                    freq[a.index()] += 1.0;
                }
            }
            freq
        })
        .collect()
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation matrix between move-action frequencies across
/// episodes. Symmetric with unit diagonal wherever defined; degenerate
/// dimensions are reported as `None`, never fabricated.
pub fn action_correlation(records: &[LocRecord]) -> CorrelationMatrix {
    let freqs = move_action_frequencies(records);
    let columns: Vec<Vec<f64>> = (0..ActionKind::MOVE_COUNT)
        .map(|a| freqs.iter().map(|f| f[a]).collect())
        .collect();
    let mut m = vec![vec![None; ActionKind::MOVE_COUNT]; ActionKind::MOVE_COUNT];
    for i in 0..ActionKind::MOVE_COUNT {
        for j in i..ActionKind::MOVE_COUNT {
            let r = pearson(&columns[i], &columns[j]);
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Window;

    fn record_with(actions: Vec<ActionKind>) -> LocRecord {
        LocRecord {
            slice_index: 0,
            final_window: Window::new(0, 0, 8, 8),
            steps: actions.len(),
            actions,
            iou: 0.0,
            recall: None,
        }
    }

    #[test]
    fn identical_frequencies_correlate_to_one() {
        use ActionKind::*;
        // ZoomCenter and ShiftUp always used the same number of times.
        let records = vec![
            record_with(vec![ZoomCenter, ShiftUp]),
            record_with(vec![ZoomCenter, ZoomCenter, ShiftUp, ShiftUp]),
            record_with(vec![ZoomCenter, ZoomCenter, ZoomCenter, ShiftUp, ShiftUp, ShiftUp]),
        ];
        let m = action_correlation(&records);
        let v = m[ZoomCenter.index()][ShiftUp.index()].unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_one_where_defined_and_none_when_constant() {
        use ActionKind::*;
        let records = vec![
            record_with(vec![ZoomCenter]),
            record_with(vec![ZoomCenter, ZoomCenter]),
        ];
        let m = action_correlation(&records);
        assert_eq!(m[ZoomCenter.index()][ZoomCenter.index()], Some(1.0));
        // ShiftUp never varies (always 0): undefined, not fabricated.
        assert_eq!(m[ShiftUp.index()][ShiftUp.index()], None);
    }

    #[test]
    fn anticorrelated_frequencies_hit_minus_one() {
        use ActionKind::*;
        let records = vec![
            record_with(vec![ZoomCenter, ZoomCenter, ShiftUp]),
            record_with(vec![ZoomCenter, ShiftUp, ShiftUp]),
        ];
        let m = action_correlation(&records);
        let v = m[ZoomCenter.index()][ShiftUp.index()].unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_is_symmetric() {
        use ActionKind::*;
        let records = vec![
            record_with(vec![ZoomCenter, ShiftUp, ShiftLeft]),
            record_with(vec![ShiftUp, ShiftUp]),
            record_with(vec![ZoomCenter, ShiftLeft, ShiftLeft]),
        ];
        let m = action_correlation(&records);
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
    }

    #[test]
    fn trigger_is_excluded_from_frequencies() {
        use ActionKind::*;
        let records = vec![record_with(vec![ZoomCenter, Trigger])];
        let f = move_action_frequencies(&records);
        assert_eq!(f[0].iter().sum::<f64>(), 1.0);
    }
}
