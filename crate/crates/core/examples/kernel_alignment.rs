//! Kernel alignment between feature matrices of different widths.

use catpress::ka::{ka, ka_centered, ka_grad, ka_gram, FeatureMatrix};
use catpress::verify::{random_features, random_orthogonal, right_multiply};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> catpress::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let teacher = random_features(&mut rng, 8, 48);
    let student = random_features(&mut rng, 8, 12);
    println!("ka(teacher, student)     = {:.6}", ka(&teacher, &student)?);
    println!("gram route               = {:.6}", ka_gram(&teacher, &student)?);
    println!("centered                 = {:.6}", ka_centered(&teacher, &student)?);

    let rotated = right_multiply(&student, &random_orthogonal(&mut rng, 12));
    println!("student rotated          = {:.6}", ka(&teacher, &rotated)?);
    let scaled = FeatureMatrix::new(8, 12, student.data.iter().map(|v| v * 40.0).collect(), "scaled");
    println!("student scaled by 40     = {:.6}", ka(&teacher, &scaled)?);

    // a few ascent steps on the student pull it towards the teacher
    let mut s = student.clone();
    for _ in 0..50 {
        let (_, gs) = ka_grad(&teacher, &s)?;
        for (v, g) in s.data.iter_mut().zip(gs) {
            *v += 0.5 * g;
        }
    }
    println!("after 50 ascent steps    = {:.6}", ka(&teacher, &s)?);
    Ok(())
}
