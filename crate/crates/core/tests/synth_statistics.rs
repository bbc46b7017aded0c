use polycrys::rng::rng_from_seed;
use polycrys::synth::{build_adjacency, generate_dataset, greedy_color, sample_seeds, voronoi_labels, SynthParams};
use polycrys::volume::Dims;

/// One-sample KS statistic against the discrete uniform law on `lo..=hi`.
fn ks_uniform(sample: &[usize], lo: usize, hi: usize) -> f64 {
    let n = sample.len() as f64;
    let width = (hi - lo + 1) as f64;
    let mut d: f64 = 0.0;
    for v in lo..=hi {
        let below = sample.iter().filter(|&&s| s < v).count() as f64 / n;
        let upto = sample.iter().filter(|&&s| s <= v).count() as f64 / n;
        let f_below = (v - lo) as f64 / width;
        let f_upto = (v - lo + 1) as f64 / width;
        d = d.max((below - f_below).abs()).max((upto - f_upto).abs());
    }
    d
}

#[test]
fn dataset_grain_counts_are_uniform_over_the_range() {
    let dir = tempfile::tempdir().unwrap();
    let template = SynthParams {
        dims: Dims::cube(16),
        ..SynthParams::default()
    };
    let m = generate_dataset(200, 50..=300, &template, 77, dir.path()).unwrap();
    assert_eq!(m.records.len(), 200);
    let ns: Vec<usize> = m.records.iter().map(|r| r.target_grains.unwrap()).collect();
    assert!(ns.iter().all(|n| (50..=300).contains(n)));
    let d = ks_uniform(&ns, 50, 300);
    // Asymptotic critical value at alpha = 0.01 (conservative for a discrete law).
    let critical = 1.6276 / (ns.len() as f64).sqrt();
    assert!(d < critical, "D = {d}, critical {critical}");
}

#[test]
fn ks_uniform_rejects_a_skewed_sample() {
    let skewed: Vec<usize> = (0..200).map(|i| 50 + (i * i) % 120).collect();
    assert!(ks_uniform(&skewed, 50, 300) > 1.6276 / 200f64.sqrt());
    let exact: Vec<usize> = (50..=300).collect();
    assert!(ks_uniform(&exact, 50, 300) < 1e-12);
}

#[test]
fn coloring_conflicts_stay_below_one_percent() {
    let dims = Dims::cube(64);
    let runs: u64 = 1000;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()) as u64;
    let (conflicts, pairs) = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let (mut c, mut p) = (0usize, 0usize);
                    for run in (w..runs).step_by(workers as usize) {
                        let mut rng = rng_from_seed(run);
                        let n = 50 + (run as usize * 37) % 251;
                        let seeds = sample_seeds(n, 0.5, dims, &mut rng).unwrap();
                        let labels = voronoi_labels(&seeds, dims).unwrap();
                        let graph = build_adjacency(&labels);
                        let coloring = greedy_color(&graph, 10, &mut rng).unwrap();
                        let counted = graph
                            .edges()
                            .filter(|&(a, b)| coloring.colors[a] == coloring.colors[b])
                            .count();
                        assert_eq!(counted, coloring.conflicts, "run {run}");
                        c += counted;
                        p += graph.edge_count();
                    }
                    (c, p)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .fold((0, 0), |(c, p), (a, b)| (c + a, p + b))
    });
    let rate = conflicts as f64 / pairs as f64;
    eprintln!("conflicting adjacent pairs: {conflicts} / {pairs} = {rate:.5}");
    assert!(rate < 0.01, "{rate}");
}
