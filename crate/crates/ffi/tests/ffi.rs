use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use aes_core::corpus::builtin_prompt_table;
use aes_core::scoring::{save_model, score_essay, ModelConfig, ModelState, ScoreReport};
use aes_core::tokenizer::build_vocabulary;
use aes_ffi::*;

fn tiny_checkpoint(dir: &Path) -> (PathBuf, ModelState) {
    let table = builtin_prompt_table();
    let vocab = build_vocabulary(&["a short story. it ends well. some other words"], 100, 1).unwrap();
    let cfg = ModelConfig {
        max_len: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        seed: 3,
        ..ModelConfig::default()
    };
    let model = ModelState::new(cfg, vocab, &table).unwrap();
    let path = dir.join("tiny.ckpt");
    save_model(&model, &path).unwrap();
    (path, model)
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(aes_last_error_message()) }.to_str().unwrap().to_string()
}

#[test]
fn load_score_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = tiny_checkpoint(dir.path());
    let p = cstr(path.to_str().unwrap());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { aes_model_load(p.as_ptr(), ptr::null(), &mut handle) }, AesStatus::Ok);
    assert!(!handle.is_null());

    let text = "A short story. It ends well.";
    let t = cstr(text);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { aes_model_score_json(handle, 8, t.as_ptr(), &mut out) }, AesStatus::Ok);
    let json = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { aes_string_free(out) };
    let via_ffi: ScoreReport = serde_json::from_str(&json).unwrap();
    let direct = score_essay(text, builtin_prompt_table().get(8).unwrap(), &model).unwrap();
    assert_eq!(via_ffi, direct);
    assert_eq!(via_ffi.traits.len(), 6);

    let mut table = ptr::null_mut();
    assert_eq!(unsafe { aes_prompt_table_json(handle, &mut table) }, AesStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(table) }.to_str().unwrap()).unwrap();
    unsafe { aes_string_free(table) };
    assert_eq!(v["prompts"].as_array().unwrap().len(), 8);

    unsafe { aes_model_free(handle) };
}

#[test]
fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = tiny_checkpoint(dir.path());
    let mut handle = ptr::null_mut();

    assert_eq!(
        unsafe { aes_model_load(ptr::null(), ptr::null(), &mut handle) },
        AesStatus::NullArgument
    );
    let missing = cstr(dir.path().join("nope.ckpt").to_str().unwrap());
    assert_eq!(unsafe { aes_model_load(missing.as_ptr(), ptr::null(), &mut handle) }, AesStatus::Io);
    assert!(!last_error().is_empty());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 10);
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, bytes).unwrap();
    let cut = cstr(cut.to_str().unwrap());
    assert_eq!(
        unsafe { aes_model_load(cut.as_ptr(), ptr::null(), &mut handle) },
        AesStatus::CorruptCheckpoint
    );
    assert!(handle.is_null());

    let p = cstr(path.to_str().unwrap());
    assert_eq!(unsafe { aes_model_load(p.as_ptr(), ptr::null(), &mut handle) }, AesStatus::Ok);
    let mut out = ptr::null_mut();
    let empty = cstr("   ");
    assert_eq!(
        unsafe { aes_model_score_json(handle, 1, empty.as_ptr(), &mut out) },
        AesStatus::EmptyEssay
    );
    let text = cstr("words");
    assert_eq!(
        unsafe { aes_model_score_json(handle, 42, text.as_ptr(), &mut out) },
        AesStatus::UnknownPrompt
    );
    assert!(last_error().contains("42"));
    assert!(out.is_null());
    unsafe { aes_model_free(handle) };
    unsafe { aes_model_free(ptr::null_mut()) };
}

#[test]
fn qwk_through_the_abi() {
    let h = [0, 1, 2, 2];
    let m = [0, 2, 2, 2];
    let mut k = 0.0;
    assert_eq!(unsafe { aes_qwk(h.as_ptr(), m.as_ptr(), 4, 0, 2, &mut k) }, AesStatus::Ok);
    assert!((k - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(
        unsafe { aes_qwk(h.as_ptr(), m.as_ptr(), 4, 2, 2, &mut k) },
        AesStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { aes_qwk(h.as_ptr(), m.as_ptr(), 0, 0, 2, &mut k) },
        AesStatus::InvalidArgument
    );
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(aes_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/aes_ffi.h")).unwrap();
    for sym in [
        "aes_model_load",
        "aes_model_free",
        "aes_model_score_json",
        "aes_prompt_table_json",
        "aes_qwk",
        "aes_string_free",
        "aes_last_error_message",
        "aes_version",
        "typedef struct AesModel AesModel",
        "AES_STATUS_UNKNOWN_PROMPT = 6",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

/// Builds the C smoke program against the generated header and shared
/// library, then runs it on a real checkpoint.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler on PATH; C smoke test not run");
        return;
    };
    let lib_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .and_then(Path::parent)
        .unwrap()
        .to_path_buf();
    if !lib_dir.join("libaes_ffi.so").exists() {
        eprintln!("no libaes_ffi.so in {}; C smoke test not run", lib_dir.display());
        return;
    }
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-laes_ffi")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");

    let (ckpt, _) = tiny_checkpoint(dir.path());
    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "smoke exited {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("\"prompt_id\":8"));
    assert!(stdout.contains("qwk 0.833333333333"));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
