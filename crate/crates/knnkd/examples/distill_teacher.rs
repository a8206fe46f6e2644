//! The retrieval teacher and its losses, worked through by hand.
//!
//! ```sh
//! cargo run --example distill_teacher
//! ```

use knnkd::distill::{
    combined_grad_logits, combined_loss, fd_grad_logits, generic_kd_loss, knn_kd_loss,
    TeacherDistribution,
};
use knnkd::model::softmax;

fn main() -> knnkd::Result<()> {
    // Retrieved neighbors as (distance, token) pairs; token 5 appears twice
    // and its kernel weights merge.
    let neighbors = [(0.0f32, 5u32), (1.0, 9), (1.5, 5), (4.0, 2)];

    println!("teacher distribution at different temperatures:");
    for tau in [0.1, 1.0, 10.0, 1e6] {
        let t = TeacherDistribution::from_neighbors(&neighbors, tau)?;
        let desc: Vec<String> = t
            .support()
            .iter()
            .map(|&(tok, p)| format!("{tok}:{p:.3}"))
            .collect();
        println!("  tau {tau:>9}: {{{}}}", desc.join(", "));
    }
    println!("(tiny tau concentrates on the nearest; large tau flattens over the retrieved set)");

    // Student distribution from logits.
    let logits = vec![0.2, -1.0, 0.5, 0.0, -0.5, 1.2, 0.0, -2.0, 0.3, 0.8];
    let student = softmax(&logits)?;
    let teacher = TeacherDistribution::from_neighbors(&neighbors, 1.0)?;
    let target = 5u32;
    let alpha = 0.5;

    let kd = knn_kd_loss(&student, &teacher);
    let dense = generic_kd_loss(&student, &teacher.to_dense(student.len()));
    let combined = combined_loss(&student, target, &teacher, alpha)?;
    println!("\nsparse distillation loss: {kd:.6}");
    println!("dense reference (zero-padded teacher): {dense:.6}");
    println!("combined objective at alpha {alpha}: {combined:.6}");

    // The analytic gradient is p - (1-alpha)*onehot - alpha*teacher; central
    // finite differences through the softmax agree to ~1e-9.
    let analytic = combined_grad_logits(&student, target, &teacher, alpha);
    let numeric = fd_grad_logits(&logits, target, &teacher, alpha, 1e-6)?;
    println!("\nper-logit gradient (analytic vs central finite differences):");
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let marker = if i as u32 == target {
            " <- target"
        } else if teacher.prob(i as u32) > 0.0 {
            " <- in support"
        } else {
            ""
        };
        println!("  token {i}: {a:+.8} vs {n:+.8}{marker}");
    }
    let sum: f64 = analytic.iter().sum();
    println!("gradient row sums to {sum:+.2e}");
    Ok(())
}
