use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tensor, Var};

/// `weight·CE(student, labels) + (1 − weight)·T²·CE(softmax(student/T),
/// softmax(teacher/T))`.
///
/// The teacher logits are plain values, so no gradient can reach them. At
/// `T = 1` the soft term is the plain soft-target cross entropy.
pub fn kd_loss<'t>(
    student: Var<'t>,
    teacher: &Tensor,
    labels: &[usize],
    weight: f64,
    temperature: f64,
) -> Result<Var<'t>> {
    if teacher.shape() != student.shape().as_slice() || teacher.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!("temperature {temperature}")));
    }
    let k = teacher.shape()[1];
    let targets = Tensor::new(teacher.shape().to_vec(), softmax_rows(teacher.data(), k, temperature))?;
    kd_loss_with_targets(student, &targets, labels, weight, temperature)
}

/// [`kd_loss`] with the teacher's soft targets given directly.
pub fn kd_loss_with_targets<'t>(
    student: Var<'t>,
    targets: &Tensor,
    labels: &[usize],
    weight: f64,
    temperature: f64,
) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Argument(format!("distillation weight {weight} outside [0, 1]")));
    }
    let hard = student.softmax_cross_entropy(labels)?;
    let soft = student.soft_cross_entropy(targets, temperature)?;
    hard.scale(weight).add(soft.scale(1.0 - weight))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn logits() -> Tensor {
        Tensor::from_rows(&[&[1.0, -0.5, 2.0], &[0.3, 0.1, -1.0]]).unwrap()
    }

    #[test]
    fn one_hot_teacher_reduces_to_cross_entropy() {
        let tape = Tape::new();
        let z = tape.param(logits());
        let labels = [2, 0];
        let one_hot = Tensor::from_rows(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]).unwrap();
        let kd = kd_loss_with_targets(z, &one_hot, &labels, 0.5, 1.0).unwrap().item().unwrap();
        let ce = z.softmax_cross_entropy(&labels).unwrap().item().unwrap();
        assert!((kd - ce).abs() < 1e-15);
    }

    #[test]
    fn unit_weight_is_plain_cross_entropy() {
        let tape = Tape::new();
        let z = tape.param(logits());
        let teacher = Tensor::from_rows(&[&[5.0, 0.0, 0.0], &[0.0, 0.0, 9.0]]).unwrap();
        let kd = kd_loss(z, &teacher, &[1, 2], 1.0, 1.0).unwrap().item().unwrap();
        let ce = z.softmax_cross_entropy(&[1, 2]).unwrap().item().unwrap();
        assert_eq!(kd, ce);
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let tape = Tape::new();
        let teacher_var = tape.param(Tensor::from_rows(&[&[0.2, 0.1, 0.0], &[1.0, 0.0, 0.5]]).unwrap());
        let z = tape.param(logits());
        let loss = kd_loss(z, &teacher_var.value(), &[0, 1], 0.5, 2.0).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(teacher_var).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(tape.grad(z).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_matches_closed_form() {
        // d/dz of w·CE + (1−w)·CE(p_T, q_T)·T² is
        // (w(softmax(z) − y) + (1−w)·T·(softmax(z/T) − q_T)) / N.
        let (w, t) = (0.3, 2.0);
        let tape = Tape::new();
        let z = tape.param(logits());
        let teacher = Tensor::from_rows(&[&[0.5, 1.5, -0.5], &[2.0, 0.0, 1.0]]).unwrap();
        let labels = [1, 2];
        tape.backward(kd_loss(z, &teacher, &labels, w, t).unwrap()).unwrap();
        let got = tape.grad(z).unwrap();
        let zd = logits();
        let p1 = softmax_rows(zd.data(), 3, 1.0);
        let pt = softmax_rows(zd.data(), 3, t);
        let qt = softmax_rows(teacher.data(), 3, t);
        for i in 0..6 {
            let y = if labels[i / 3] == i % 3 { 1.0 } else { 0.0 };
            let want = (w * (p1[i] - y) + (1.0 - w) * t * (pt[i] - qt[i])) / 2.0;
            assert!((got.data()[i] - want).abs() < 1e-14, "{i}");
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let z = tape.param(logits());
        let teacher = Tensor::zeros([2, 4]).unwrap();
        assert!(matches!(kd_loss(z, &teacher, &[0, 0], 0.5, 1.0), Err(Error::Dimension(_))));
    }
}
