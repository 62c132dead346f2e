use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use lass::corpus::{CorpusSet, Split};
use lass_ffi::*;

const TINY: &str = "
[data]
families = aa ab | ba
sizes = aa:40, ab:20, ba:20
valid_size = 4
test_size = 4
zero_shot_test_size = 4
extension =
pivot_words = 20
min_len = 2
max_len = 4
[model]
num_layers = 1
d_model = 16
num_heads = 2
d_ff = 32
max_seq_len = 10
[train]
max_steps = 10
batch_size = 4
warmup_steps = 2
eval_every = 5
finetune_steps = 1:3
[mask]
alpha = 0.5
";

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn path(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    let p = lass_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Runs gen-data, train-base and make-masks in a fresh directory.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.ini");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    for cmd in ["gen-data", "train-base", "make-masks"] {
        let status = unsafe { lass_run_command(c(cmd).as_ptr(), path(&cfg).as_ptr(), path(&run).as_ptr(), -1, 0) };
        assert_eq!(status, LassStatus::Ok, "{cmd}: {}", last_error());
    }
    dir
}

#[test]
fn pipeline_model_and_masks_round_trip_through_handles() {
    let dir = prepared();
    let run = dir.path().join("run");
    let ckpt = run.join("ckpt/base.10.ckpt");
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(lass_model_load(path(&ckpt).as_ptr(), &mut model), LassStatus::Ok);
        let (mut vocab, mut n) = (0usize, 0usize);
        assert_eq!(lass_model_info(model, &mut vocab, &mut n), LassStatus::Ok);
        assert!(vocab > 0 && n > vocab);

        let mut own = ptr::null_mut();
        assert_eq!(lass_mask_prune(model, 0.5, 0, c("en").as_ptr(), c("aa").as_ptr(), &mut own), LassStatus::Ok);
        let mut density = 0.0;
        assert_eq!(lass_mask_density(own, &mut density), LassStatus::Ok);
        assert!((density - 0.5).abs() < 0.01, "{density}");

        let mut enc = ptr::null_mut();
        let mut dec = ptr::null_mut();
        assert_eq!(lass_mask_load(path(&run.join("masks/ab-en.mask")).as_ptr(), &mut enc), LassStatus::Ok);
        assert_eq!(lass_mask_load(path(&run.join("masks/en-ba.mask")).as_ptr(), &mut dec), LassStatus::Ok);
        let mut merged = ptr::null_mut();
        assert_eq!(lass_mask_merge_zero_shot(enc, dec, &mut merged), LassStatus::Ok);
        let mut sim = 0.0;
        assert_eq!(lass_mask_similarity(merged, merged, &mut sim), LassStatus::Ok);
        assert_eq!(sim, 1.0);

        let corpus = CorpusSet::load_dir(run.join("data")).unwrap();
        let pair = "ab-ba".parse().unwrap();
        let example = &corpus.pair(&pair).unwrap().split(Split::Test)[0];
        let src = corpus.source_ids(&pair, &example.src).unwrap();
        let target = corpus.registry.language("ba").unwrap().token;
        let mut out = [0u32; 16];
        let mut len = 0usize;
        let st = lass_translate(model, merged, src.as_ptr(), src.len(), target, 2, out.as_mut_ptr(), out.len(), &mut len);
        assert_eq!(st, LassStatus::Ok, "{}", last_error());
        assert!(len <= 9);
        if len > 0 {
            let mut small = [0u32; 1];
            let mut need = 0usize;
            let st = lass_translate(model, merged, src.as_ptr(), src.len(), target, 2, small.as_mut_ptr(), 0, &mut need);
            assert_eq!(st, LassStatus::BufferTooSmall);
            assert_eq!(need, len);
        }

        let saved = dir.path().join("copy.mask");
        assert_eq!(lass_mask_save(merged, path(&saved).as_ptr()), LassStatus::Ok);
        let saved_model = dir.path().join("copy.ckpt");
        assert_eq!(lass_model_save(model, path(&saved_model).as_ptr()), LassStatus::Ok);
        let mut reloaded = ptr::null_mut();
        assert_eq!(lass_model_load(path(&saved_model).as_ptr(), &mut reloaded), LassStatus::Ok);
        let mut again = [0u32; 16];
        let mut len2 = 0usize;
        let st = lass_translate(reloaded, merged, src.as_ptr(), src.len(), target, 2, again.as_mut_ptr(), again.len(), &mut len2);
        assert_eq!(st, LassStatus::Ok);
        assert_eq!(out[..len], again[..len2]);
        lass_model_free(reloaded);

        for m in [own, enc, dec, merged] {
            lass_mask_free(m);
        }
        lass_model_free(model);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(lass_model_load(path(&missing).as_ptr(), &mut model), LassStatus::Io);
        assert!(last_error().contains("nope.ckpt"));
        assert!(model.is_null());
        assert_eq!(lass_model_load(ptr::null(), &mut model), LassStatus::NullArgument);

        let run = dir.path().join("run");
        let st = lass_run_command(c("zero-shot").as_ptr(), ptr::null(), path(&run).as_ptr(), -1, 0);
        assert_eq!(st, LassStatus::Prerequisite);
        assert!(last_error().contains("gen-data"));
        let st = lass_run_command(c("bogus").as_ptr(), ptr::null(), path(&run).as_ptr(), -1, 0);
        assert_eq!(st, LassStatus::Config);

        let mut d = 0.0;
        assert_eq!(lass_mask_density(ptr::null(), &mut d), LassStatus::NullArgument);
        assert!(last_error().contains("`mask` is null"));
        lass_model_free(ptr::null_mut());
        lass_mask_free(ptr::null_mut());
    }
}

#[test]
fn corrupt_mask_file_is_a_format_error() {
    let dir = prepared();
    let file = dir.path().join("run/masks/aa-en.mask");
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 5;
    bytes[last] ^= 0x10;
    std::fs::write(&file, bytes).unwrap();
    let mut mask = ptr::null_mut();
    let st = unsafe { lass_mask_load(path(&file).as_ptr(), &mut mask) };
    assert_eq!(st, LassStatus::Format, "{}", last_error());
    assert!(mask.is_null());
}

#[test]
fn success_clears_the_last_error() {
    let mut d = 0.0;
    assert_eq!(unsafe { lass_mask_density(ptr::null(), &mut d) }, LassStatus::NullArgument);
    assert!(!lass_last_error().is_null());
    let v = unsafe { CStr::from_ptr(lass_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let st = unsafe { lass_run_command(c("gen-data").as_ptr(), ptr::null(), path(&run).as_ptr(), 5, 0) };
    assert_eq!(st, LassStatus::Ok);
    assert!(lass_last_error().is_null());
}
