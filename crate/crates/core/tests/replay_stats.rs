use simref_core::ReplayBuffer;

#[test]
fn slot_selection_is_uniform() {
    let (capacity, k, trials) = (16usize, 4usize, 10_000usize);
    let mut buf = ReplayBuffer::new(capacity, 2024).unwrap();
    let ids: Vec<usize> = (0..capacity).collect();
    buf.seed_fill(&ids).unwrap();
    let mut counts = vec![0usize; capacity];
    for _ in 0..trials {
        let (fakes, _) = buf.compose_disc_batch(&[usize::MAX; 4], &[]).unwrap();
        for &id in &fakes[k..] {
            counts[id] += 1;
        }
    }
    let p = k as f64 / capacity as f64;
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for (slot, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - mean).abs() <= 3.0 * sigma,
            "slot {slot}: {c} draws, expected {mean:.0} ± {:.0}",
            3.0 * sigma
        );
    }
}

#[test]
fn survival_matches_closed_form() {
    let (capacity, half, trials, horizon) = (16usize, 4usize, 5_000usize, 8usize);
    let mut alive = vec![0usize; horizon + 1];
    for trial in 0..trials {
        let mut buf = ReplayBuffer::new(capacity, trial as u64).unwrap();
        let ids: Vec<usize> = (0..capacity).collect();
        buf.seed_fill(&ids).unwrap();
        alive[0] += capacity;
        for slot in alive.iter_mut().skip(1) {
            buf.replace_half(&vec![usize::MAX; half]).unwrap();
            *slot += buf.slots().iter().filter(|&&v| v != usize::MAX).count();
        }
    }
    for (k, &a) in alive.iter().enumerate().skip(1) {
        let empirical = a as f64 / (trials * capacity) as f64;
        let expected = (1.0 - half as f64 / capacity as f64).powi(k as i32);
        let rel = (empirical - expected).abs() / expected;
        assert!(rel < 0.05, "k={k}: empirical {empirical:.4} vs {expected:.4}");
    }
}
