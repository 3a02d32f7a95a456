//! Frozen outputs of the tiny fixture. Set `W1A8_BLESS=1` to regenerate.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use w1a8::coe::{build_roms, emit_coe, parse_coe, Radix, DEFAULT_WORD_WIDTH};
use w1a8::detect::detect;
use w1a8::fixture::{
    default_fixture, example_layout, random_manifest, synthetic_image, tiny_fixture_model,
    FIXTURE_SEED,
};
use w1a8::image::{encode_ppm, parse_ppm};
use w1a8::reference::forward_fixed_direct;
use w1a8::stream::{encode_head_words, serialize_head};
use w1a8::{load_manifest, save_manifest};

const GOLDEN_SEED: u64 = 5;

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny")
}

fn blessing() -> bool {
    std::env::var_os("W1A8_BLESS").is_some_and(|v| v == "1")
}

fn check(rel: &str, bytes: &[u8]) {
    let path = golden_dir().join(rel);
    if blessing() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, bytes).unwrap();
        return;
    }
    let want = fs::read(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with W1A8_BLESS=1)", path.display()));
    assert!(
        want == bytes,
        "{} differs from the frozen copy",
        path.display()
    );
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn tiny_fixture_outputs_are_frozen() {
    let model = tiny_fixture_model();
    let m = random_manifest(&model, GOLDEN_SEED).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_manifest(&m, tmp.path()).unwrap();
    for (name, bytes) in sorted_files(tmp.path()) {
        check(&format!("manifest/{name}"), &bytes);
    }
    // the frozen manifest loads back to the same parameters
    if !blessing() {
        assert_eq!(load_manifest(golden_dir().join("manifest")).unwrap(), m);
    }

    let image = synthetic_image(model.input, GOLDEN_SEED + 1);
    check("image.ppm", &encode_ppm(&image).unwrap());
    assert_eq!(parse_ppm(&encode_ppm(&image).unwrap()).unwrap(), image);

    let head = forward_fixed_direct(&m, &image).unwrap().head;
    let words = serialize_head(&head, model.output_shape()).unwrap();
    check("head.bin", &encode_head_words(&words));

    let layout = example_layout();
    let mut anchors = serde_json::to_string_pretty(&layout).unwrap();
    anchors.push('\n');
    check("anchors.json", anchors.as_bytes());
    let boxes = detect(&words, model.output_shape(), &layout, 0.3, 0.45).unwrap();
    let mut text = serde_json::to_string_pretty(&serde_json::json!({ "boxes": boxes })).unwrap();
    text.push('\n');
    check("boxes.json", text.as_bytes());

    for (entry, img) in build_roms(&m, DEFAULT_WORD_WIDTH, Radix::Hex).unwrap() {
        let text = emit_coe(&img);
        assert_eq!(parse_coe(&text, DEFAULT_WORD_WIDTH).unwrap(), img);
        check(&format!("coe/{}.coe", entry.name), text.as_bytes());
    }
}

#[test]
fn golden_coe_files_reparse() {
    let dir = golden_dir().join("coe");
    if blessing() || !dir.exists() {
        return;
    }
    for (name, bytes) in sorted_files(&dir) {
        let text = String::from_utf8(bytes).unwrap();
        let img = parse_coe(&text, DEFAULT_WORD_WIDTH).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(emit_coe(&img), text, "{name}");
    }
}

/// Digest of every blob and the header of the default fixture.
#[test]
fn default_fixture_digest() {
    let m = default_fixture(FIXTURE_SEED).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_manifest(&m, tmp.path()).unwrap();
    let files = sorted_files(tmp.path());
    let conv5 = files.iter().find(|(n, _)| n == "conv5_w.bin").unwrap();
    assert_eq!(conv5.1.len(), 18432);
    let conv2 = build_roms(&m, 16, Radix::Hex)
        .unwrap()
        .into_iter()
        .find(|(e, _)| e.name == "conv2_w")
        .unwrap();
    assert_eq!(conv2.1.depth(), 288);
    let mut h = Sha256::new();
    for (name, bytes) in &files {
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    check("default_fixture.sha256", format!("{digest}\n").as_bytes());
}
