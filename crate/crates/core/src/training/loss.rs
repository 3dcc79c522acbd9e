use crate::geometry::{chamfer_l1, PointCloud};

/// `CD(p_init, gt) + sum_i CD(fine_i, gt)` with l1 Chamfer terms.
pub fn total_loss(p_init: &PointCloud, fines: &[PointCloud], gt: &PointCloud) -> f64 {
    chamfer_l1(p_init, gt) + fines.iter().map(|f| chamfer_l1(f, gt)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(p: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(p.to_vec()).unwrap()
    }

    #[test]
    fn exact_outputs_give_zero() {
        let gt = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(total_loss(&gt, &[gt.clone(), gt.clone()], &gt), 0.0);
    }

    #[test]
    fn terms_add() {
        let gt = cloud(&[[0.0, 0.0, 0.0]]);
        let half = cloud(&[[0.5, 0.0, 0.0]]);
        assert!((total_loss(&gt, &[half.clone(), half], &gt) - 1.0).abs() < 1e-15);
    }
}
