use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use disp::checkpoint::{dense_to_checkpoint, gates_to_checkpoint, model_hash};
use disp::model::{DenseModel, GateSlot, ModelSpec};
use disp::prune::{extract, random_gates};
use disp::rng::{stream_rng, Stream};
use disp_ffi::*;

fn spec() -> ModelSpec {
    ModelSpec {
        d: 8,
        n_layers: 2,
        n_heads: 2,
        d_mid: 12,
        max_seq_len: 8,
        ..ModelSpec::tiny()
    }
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = disp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    dense: PathBuf,
    gates: PathBuf,
    model: DenseModel<f64>,
    gate_list: Vec<disp::model::BlockGates>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let s = spec();
    let model = DenseModel::<f64>::init(&s, 4).unwrap();
    let dense = dir.path().join("dense.ckpt");
    dense_to_checkpoint(&model).save(&dense).unwrap();
    let gate_list = random_gates(&s, &mut stream_rng(1, Stream::Verification, 0), 0.5);
    let gates = dir.path().join("gates.ckpt");
    gates_to_checkpoint(&s, &gate_list).save(&gates).unwrap();
    Fixture { _dir: dir, dense, gates, model, gate_list }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(disp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dense_roundtrip_matches_core() {
    let f = fixture();
    let mut h: *mut DispDenseModel = ptr::null_mut();
    unsafe {
        assert_eq!(disp_dense_load(cpath(&f.dense).as_ptr(), &mut h), DispStatus::Ok);
        let mut info = DispModelInfo::default();
        assert_eq!(disp_dense_info(h, &mut info), DispStatus::Ok);
        assert_eq!((info.d, info.n_layers, info.d_mid, info.gated_mlp), (8, 2, 12, 1));
        assert_eq!(info.param_count, f.model.param_count());

        let tokens = [1u32, 5, 9, 200, 256, 3];
        let mut out = vec![0.0; 6 * 257];
        assert_eq!(disp_dense_logits(h, tokens.as_ptr(), 2, 3, out.as_mut_ptr(), out.len()), DispStatus::Ok);
        let toks: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        assert_eq!(out, f.model.logits(&toks, 2, None).unwrap().into_data());

        let mut buf = [0 as std::ffi::c_char; 65];
        assert_eq!(disp_dense_hash(h, buf.as_mut_ptr(), buf.len()), DispStatus::Ok);
        let hash = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_string();
        assert_eq!(hash, model_hash(&f.model).unwrap());

        let text = b"hello world, hello world";
        let mut ppl = 0.0;
        assert_eq!(disp_dense_perplexity(h, text.as_ptr(), text.len(), 8, &mut ppl), DispStatus::Ok);
        assert!(ppl.is_finite() && ppl > 1.0);
        disp_dense_free(h);
    }
}

#[test]
fn prune_save_load_and_widths() {
    let f = fixture();
    let expected = extract(&f.model, &f.gate_list).unwrap();
    unsafe {
        let mut h: *mut DispDenseModel = ptr::null_mut();
        assert_eq!(disp_dense_load(cpath(&f.dense).as_ptr(), &mut h), DispStatus::Ok);
        let mut p: *mut DispPrunedModel = ptr::null_mut();
        assert_eq!(disp_prune(h, cpath(&f.gates).as_ptr(), &mut p), DispStatus::Ok);
        let mut info = DispModelInfo::default();
        assert_eq!(disp_pruned_info(p, &mut info), DispStatus::Ok);
        assert_eq!(info.param_count, expected.param_count());
        for l in 0..2 {
            for (k, slot) in GateSlot::ALL.into_iter().enumerate() {
                let mut w = 0;
                assert_eq!(disp_pruned_width(p, l, k, &mut w), DispStatus::Ok);
                assert_eq!(w, f.gate_list[l].get(slot).nnz());
            }
        }
        let mut w = 0;
        assert_eq!(disp_pruned_width(p, 0, 5, &mut w), DispStatus::InvalidArgument);

        let saved = f.dense.with_file_name("pruned.ckpt");
        assert_eq!(disp_pruned_save(p, cpath(&saved).as_ptr()), DispStatus::Ok);
        let mut q: *mut DispPrunedModel = ptr::null_mut();
        assert_eq!(disp_pruned_load(cpath(&saved).as_ptr(), &mut q), DispStatus::Ok);

        let tokens = [7u32, 8, 9, 10];
        let mut a = vec![0.0; 4 * 257];
        let mut b = vec![0.0; 4 * 257];
        assert_eq!(disp_pruned_logits(p, tokens.as_ptr(), 1, 4, a.as_mut_ptr(), a.len()), DispStatus::Ok);
        assert_eq!(disp_pruned_logits(q, tokens.as_ptr(), 1, 4, b.as_mut_ptr(), b.len()), DispStatus::Ok);
        assert_eq!(a, b);
        let masked = f.model.logits(&[7, 8, 9, 10], 1, Some(&f.gate_list)).unwrap();
        let diff = a.iter().zip(masked.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9, "{diff}");

        let text = b"abcabcabcabc";
        let (mut p1, mut p2) = (0.0, 0.0);
        assert_eq!(disp_pruned_perplexity(q, text.as_ptr(), text.len(), 8, &mut p1), DispStatus::Ok);
        assert_eq!(disp_pruned_perplexity(p, text.as_ptr(), text.len(), 8, &mut p2), DispStatus::Ok);
        assert_eq!(p1, p2);

        disp_pruned_free(q);
        disp_pruned_free(p);
        disp_dense_free(h);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let f = fixture();
    unsafe {
        let mut h: *mut DispDenseModel = ptr::null_mut();
        assert_eq!(disp_dense_load(ptr::null(), &mut h), DispStatus::InvalidArgument);
        assert!(last_error().contains("null"));
        let missing = CString::new("/nonexistent/dense.ckpt").unwrap();
        assert_eq!(disp_dense_load(missing.as_ptr(), &mut h), DispStatus::Io);
        assert!(h.is_null());
        assert_eq!(disp_dense_load(cpath(&f.gates).as_ptr(), &mut h), DispStatus::Format);
        assert!(last_error().contains("dense"));
        let mut p: *mut DispPrunedModel = ptr::null_mut();
        assert_eq!(disp_pruned_load(cpath(&f.dense).as_ptr(), &mut p), DispStatus::Format);

        assert_eq!(disp_dense_load(cpath(&f.dense).as_ptr(), &mut h), DispStatus::Ok);
        let tokens = [1u32, 2];
        let mut small = vec![0.0; 10];
        assert_eq!(
            disp_dense_logits(h, tokens.as_ptr(), 1, 2, small.as_mut_ptr(), small.len()),
            DispStatus::InvalidArgument
        );
        let bad = [1u32, 9999];
        let mut out = vec![0.0; 2 * 257];
        assert_eq!(disp_dense_logits(h, bad.as_ptr(), 1, 2, out.as_mut_ptr(), out.len()), DispStatus::Contract);
        let mut short = [0 as std::ffi::c_char; 10];
        assert_eq!(disp_dense_hash(h, short.as_mut_ptr(), short.len()), DispStatus::InvalidArgument);
        assert_eq!(disp_dense_info(ptr::null(), &mut DispModelInfo::default()), DispStatus::InvalidArgument);
        disp_dense_free(h);
        disp_dense_free(ptr::null_mut());
        disp_pruned_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/disp.h")).unwrap();
    for name in [
        "disp_version",
        "disp_last_error",
        "disp_dense_load",
        "disp_dense_free",
        "disp_dense_info",
        "disp_dense_logits",
        "disp_dense_perplexity",
        "disp_dense_hash",
        "disp_prune",
        "disp_pruned_load",
        "disp_pruned_save",
        "disp_pruned_free",
        "disp_pruned_info",
        "disp_pruned_width",
        "disp_pruned_logits",
        "disp_pruned_perplexity",
        "typedef struct DispDenseModel DispDenseModel",
        "DISP_STATUS_INVALID_ARGUMENT = 1",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(
        &src,
        "#include \"disp.h\"\n\
         int main(void) { DispDenseModel *m = 0; DispStatus s = disp_dense_load(\"/nope\", &m);\n\
         return s == DISP_STATUS_IO && disp_last_error() != 0 ? 0 : 1; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

/// Links a C program against the static library and runs it on a real checkpoint.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(Path::parent).unwrap();
    if !lib_dir.join("libdisp_ffi.a").exists() {
        eprintln!("static library not built; skipping");
        return;
    }
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("run.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "disp.h"
int main(int argc, char **argv) {
    DispDenseModel *m = NULL;
    if (argc < 2 || disp_dense_load(argv[1], &m) != DISP_STATUS_OK) return 2;
    DispModelInfo info;
    disp_dense_info(m, &info);
    uint32_t tokens[3] = {65, 66, 67};
    double *out = malloc(sizeof(double) * 3 * info.vocab_size);
    DispStatus s = disp_dense_logits(m, tokens, 1, 3, out, 3 * info.vocab_size);
    printf("%zu %.17g\n", info.param_count, out[0]);
    free(out);
    disp_dense_free(m);
    return s == DISP_STATUS_OK ? 0 : 3;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("run");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(&cc)
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(lib_dir.join("libdisp_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "link failed");
    let out = Command::new(&bin).arg(&f.dense).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    let mut parts = text.split_whitespace();
    let count: usize = parts.next().unwrap().parse().unwrap();
    let first: f64 = parts.next().unwrap().parse().unwrap();
    assert_eq!(count, f.model.param_count());
    assert_eq!(first, f.model.logits(&[65, 66, 67], 1, None).unwrap().data()[0]);
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
