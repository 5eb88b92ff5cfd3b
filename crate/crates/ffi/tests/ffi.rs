use std::ffi::{c_char, CStr, CString};
use std::ptr;

use depthroute::backbone::{AnyBackbone, CounterModel};
use depthroute::routing::{save_routed, RouterStack, EXECUTE};
use depthroute::tasks::{gen_corpus, CorpusSpec};
use depthroute_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dr_last_error()) }.to_string_lossy().into_owned()
}

fn counter(layers: usize) -> *mut DrBackbone {
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { dr_counter_backbone_new(layers, 24, 3, &mut b) }, DR_OK);
    b
}

#[test]
fn backbone_lifecycle_and_forward() {
    let b = counter(6);
    let mut n = 0usize;
    assert_eq!(unsafe { dr_backbone_num_layers(b, &mut n) }, DR_OK);
    assert_eq!(n, 6);

    let inst = &gen_corpus(&[0, 0, 1, 0, 0, 0, 0], 1, &CorpusSpec { layers: 6, ..CorpusSpec::default() })[0];
    let path: Vec<usize> = (1..=6).collect();
    let mut buf = [0 as c_char; 64];
    let mut needed = 0usize;
    let rc = unsafe {
        dr_forward_with_path(b, inst.tokens.as_ptr(), inst.tokens.len(), path.as_ptr(), path.len(), buf.as_mut_ptr(), buf.len(), &mut needed)
    };
    assert_eq!(rc, DR_OK, "{}", last_error());
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(needed, text.len() + 1);
    assert!(text.starts_with("\\boxed{"), "{text}");

    let mut tiny = [0 as c_char; 2];
    let rc = unsafe {
        dr_forward_with_path(b, inst.tokens.as_ptr(), inst.tokens.len(), path.as_ptr(), path.len(), tiny.as_mut_ptr(), tiny.len(), &mut needed)
    };
    assert_eq!(rc, DR_ERR_INPUT);
    assert_eq!(needed, text.len() + 1);
    unsafe { dr_backbone_free(b) };
    unsafe { dr_backbone_free(ptr::null_mut()) };
}

#[test]
fn path_rules() {
    let ok = [1usize, 2, 2, 4, 5];
    assert_eq!(unsafe { dr_validate_path(ok.as_ptr(), ok.len(), 5) }, DR_OK);
    let mut labels = [9u8; 5];
    assert_eq!(unsafe { dr_path_to_labels(ok.as_ptr(), ok.len(), 5, labels.as_mut_ptr()) }, DR_OK);
    assert_eq!(labels, [1, 2, 0, 1, 1]);

    let bad = [3usize, 1];
    assert_eq!(unsafe { dr_validate_path(bad.as_ptr(), bad.len(), 5) }, DR_ERR_CONSTRAINT);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { dr_validate_path(ptr::null(), 2, 5) }, DR_ERR_NULL);
}

#[test]
fn loss_helpers() {
    let mut a = [0.0; 3];
    assert_eq!(unsafe { dr_effective_number_weights(10, 80, 10, 0.999, a.as_mut_ptr()) }, DR_OK);
    assert!((a[0] - 1.409).abs() < 1e-3 && (a[1] - 0.182).abs() < 1e-3);
    assert_eq!(unsafe { dr_effective_number_weights(0, 0, 0, 0.999, a.as_mut_ptr()) }, DR_ERR_INPUT);

    let probs = [0.2, 0.7, 0.1];
    let labels = [1u8];
    let ones = [1.0; 3];
    let mut loss = 0.0;
    assert_eq!(unsafe { dr_focal_loss(probs.as_ptr(), labels.as_ptr(), 1, ones.as_ptr(), 2.0, &mut loss) }, DR_OK);
    assert!((loss - 0.0321).abs() < 1e-4);

    let mut out = [0.0; 3];
    assert_eq!(unsafe { dr_control_interpolate(probs.as_ptr(), -1.0, out.as_mut_ptr()) }, DR_OK);
    assert_eq!(out, [1.0, 0.0, 0.0]);
    assert_eq!(unsafe { dr_control_interpolate(probs.as_ptr(), 2.0, out.as_mut_ptr()) }, DR_ERR_INPUT);
}

#[test]
fn routed_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("routed.ckpt");
    let model = CounterModel::new(6, 24, 3).unwrap();
    save_routed(&file, &AnyBackbone::Counter(model), &RouterStack::constant(6, 24, 8, 4, EXECUTE)).unwrap();

    let path = CString::new(file.to_str().unwrap()).unwrap();
    let (mut b, mut s) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { dr_router_stack_load(path.as_ptr(), &mut b, &mut s) }, DR_OK, "{}", last_error());

    let inst = &gen_corpus(&[0, 0, 1, 0, 0, 0, 0], 1, &CorpusSpec { layers: 6, ..CorpusSpec::default() })[0];
    let mut decisions = [9u8; 6];
    let mut executed = 0usize;
    let mut buf = [0 as c_char; 64];
    let rc = unsafe {
        dr_routed_forward(b, s, inst.tokens.as_ptr(), inst.tokens.len(), f64::NAN, decisions.as_mut_ptr(), &mut executed, buf.as_mut_ptr(), buf.len(), ptr::null_mut())
    };
    assert_eq!(rc, DR_OK, "{}", last_error());
    assert_eq!(decisions, [1; 6]);
    assert_eq!(executed, 6);
    let rc = unsafe {
        dr_routed_forward(b, s, inst.tokens.as_ptr(), inst.tokens.len(), 1.0, decisions.as_mut_ptr(), &mut executed, buf.as_mut_ptr(), buf.len(), ptr::null_mut())
    };
    assert_eq!(rc, DR_OK);
    assert_eq!(executed, 12);
    unsafe {
        dr_router_stack_free(s);
        dr_backbone_free(b);
    }

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut b2 = ptr::null_mut();
    assert_eq!(unsafe { dr_backbone_load(missing.as_ptr(), &mut b2) }, DR_ERR_IO);
    assert!(b2.is_null());
    assert_eq!(unsafe { dr_backbone_load(ptr::null(), &mut b2) }, DR_ERR_NULL);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/depthroute.h")).unwrap();
    for name in [
        "dr_last_error",
        "dr_counter_backbone_new",
        "dr_backbone_load",
        "dr_backbone_free",
        "dr_backbone_num_layers",
        "dr_validate_path",
        "dr_path_to_labels",
        "dr_forward_with_path",
        "dr_router_stack_load",
        "dr_router_stack_free",
        "dr_routed_forward",
        "dr_effective_number_weights",
        "dr_focal_loss",
        "dr_control_interpolate",
        "typedef struct DrBackbone DrBackbone",
        "#define DR_ERR_PANIC 8",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"depthroute.h\"\nint main(void) { DrBackbone *b = 0; size_t n = 0; \
         int rc = dr_counter_backbone_new(4, 16, 1, &b); rc |= dr_backbone_num_layers(b, &n); \
         dr_backbone_free(b); return rc == DR_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc);
        }
    }
    Err(())
}
