use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::s;

use spn_bench::{frames, pipeline, residues};
use spn_core::decomposition::{snp_table, solve};
use spn_core::denoise::denoise_block;
use spn_core::fingerprint::{batch_match, build_reference};
use spn_core::{correlate, frame_residue, CfaChannel, ConditionMeans};

fn block_denoise(c: &mut Criterion) {
    let img = &frames(256, 1)[0];
    let mut g = c.benchmark_group("denoise_block");
    for b in [32usize, 64, 128] {
        let block = img.pixels().slice(s![..b, ..b]).to_owned();
        let cfg = pipeline(b).denoise;
        g.bench_with_input(BenchmarkId::from_parameter(b), &block, |bench, blk| {
            bench.iter(|| denoise_block(blk, &cfg).unwrap())
        });
    }
    g.finish();
}

fn residue_extraction(c: &mut Criterion) {
    let mut g = c.benchmark_group("frame_residue");
    g.sample_size(10);
    for size in [256usize, 512] {
        let img = frames(size, 1).remove(0);
        let cfg = pipeline(128);
        g.bench_with_input(BenchmarkId::from_parameter(size), &img, |bench, img| {
            bench.iter(|| frame_residue(img, "f", &cfg).unwrap())
        });
    }
    g.finish();
}

fn matching(c: &mut Criterion) {
    let cfg = pipeline(64);
    let res = residues(256, 8, &cfg);
    let reference = build_reference(&res[..4]).unwrap();
    let (x, y) = (reference.stack.plane(CfaChannel::R), res[5].plane(CfaChannel::R));
    c.bench_function("correlate_128x128", |b| b.iter(|| correlate(x, y).unwrap()));
    c.bench_function("build_reference_4", |b| b.iter(|| build_reference(&res[..4]).unwrap()));
    let refs = vec![reference];
    c.bench_function("batch_match_1x4", |b| b.iter(|| batch_match(&refs, &res[4..]).unwrap()));
}

fn decomposition(c: &mut Criterion) {
    let means = ConditionMeans::new(0.05, 0.04, 0.048, 0.038).unwrap();
    c.bench_function("solve_and_snp", |b| b.iter(|| snp_table(&solve(&means))));
}

criterion_group!(benches, block_denoise, residue_extraction, matching, decomposition);
criterion_main!(benches);
