use std::ffi::CStr;
use std::ptr;

use congrad::lowrank::{cosine, power_iterate, reconstruct, DenseMatrix};
use congrad_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    unsafe {
        cg_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn cosine_and_null_pointers() {
    let a = [1.0, 0.0, 1.0];
    let b = [2.0, 0.0, 2.0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(cg_cosine(a.as_ptr(), b.as_ptr(), 3, &mut out), CgStatus::Ok);
        assert!((out - 1.0).abs() < 1e-15);
        assert_eq!(cg_cosine(ptr::null(), b.as_ptr(), 3, &mut out), CgStatus::NullPointer);
    }
    assert!(last_error().contains("`a`"));
}

#[test]
fn error_message_truncates() {
    unsafe {
        cg_cosine(ptr::null(), ptr::null(), 1, ptr::null_mut());
        let full = cg_last_error_message(ptr::null_mut(), 0);
        let mut buf = [1 as std::ffi::c_char; 4];
        assert_eq!(cg_last_error_message(buf.as_mut_ptr(), 4), full);
        assert_eq!(buf[3], 0);
    }
}

#[test]
fn power_iterate_matches_the_library() {
    let m = DenseMatrix::random_normal(12, 9, 4);
    let want = reconstruct(&power_iterate(&m, 3, 2, 7).unwrap());
    let mut out = vec![0.0; 12 * 9];
    unsafe {
        assert_eq!(
            cg_power_iterate(m.as_slice().as_ptr(), 12, 9, 3, 2, 7, out.as_mut_ptr()),
            CgStatus::Ok
        );
        assert_eq!(out, want.as_slice());
        assert_eq!(
            cg_power_iterate(m.as_slice().as_ptr(), 12, 9, 10, 2, 7, out.as_mut_ptr()),
            CgStatus::InvalidArgument
        );
    }
    assert!(last_error().contains("rank 10"));
}

#[test]
fn consensus_projects_conflicts() {
    let grads = [1.0, 0.0, -1.0, 1.0];
    let mut out = [0.0; 2];
    unsafe {
        assert_eq!(cg_consensus(grads.as_ptr(), 2, 2, 0, out.as_mut_ptr()), CgStatus::Ok);
    }
    // each projected onto the other's normal plane, then summed
    assert!((out[0] - 0.5).abs() < 1e-12 && (out[1] - 1.5).abs() < 1e-12, "{out:?}");
}

#[test]
fn select_marks_top_fraction() {
    let scores = [0.1, 0.9, -0.3, 0.9, 0.5];
    let mut mask = [9u8; 5];
    unsafe {
        assert_eq!(cg_select(scores.as_ptr(), 5, 0.4, 1, mask.as_mut_ptr()), CgStatus::Ok);
        assert_eq!(mask, [0, 1, 0, 1, 0]);
        assert_eq!(cg_select(scores.as_ptr(), 5, 0.4, 0, mask.as_mut_ptr()), CgStatus::Ok);
        assert_eq!(mask, [1, 0, 1, 0, 0]);
        assert_eq!(
            cg_select(scores.as_ptr(), 5, 0.0, 1, mask.as_mut_ptr()),
            CgStatus::InvalidArgument
        );
    }
}

#[test]
fn policy_loss_and_gradient() {
    unsafe {
        let mut policy = ptr::null_mut();
        let mut reference = ptr::null_mut();
        assert_eq!(cg_policy_new(2, 4, 3, 1.0, 1, &mut policy), CgStatus::Ok);
        assert_eq!(cg_policy_new(2, 4, 3, 1.0, 2, &mut reference), CgStatus::Ok);
        let mut n = 0;
        assert_eq!(cg_policy_num_params(policy, &mut n), CgStatus::Ok);
        assert_eq!(n, 2 * 4 + 4 * 4);

        let chosen = [0u32, 1, 2];
        let rejected = [3u32];
        let pair = CgPair {
            prompt_id: 1,
            chosen: chosen.as_ptr(),
            chosen_len: 3,
            rejected: rejected.as_ptr(),
            rejected_len: 1,
        };
        let mut lp = 0.0;
        assert_eq!(cg_policy_log_prob(policy, 1, chosen.as_ptr(), 3, &mut lp), CgStatus::Ok);
        assert!(lp < 0.0);

        let mut loss = 0.0;
        assert_eq!(
            cg_lp_dpo_loss(policy, reference, &pair, 1.0, 0.01, &mut loss),
            CgStatus::Ok
        );
        assert!(loss > 0.0);
        let mut grad = vec![0.0; n];
        assert_eq!(
            cg_lp_dpo_gradient(policy, reference, &pair, 1.0, 0.01, grad.as_mut_ptr(), n),
            CgStatus::Ok
        );
        assert!(grad.iter().any(|g| *g != 0.0));
        assert_eq!(
            cg_lp_dpo_gradient(policy, reference, &pair, 1.0, 0.01, grad.as_mut_ptr(), n - 1),
            CgStatus::BufferTooSmall
        );

        let bad = CgPair { chosen_len: 4, ..pair };
        let long = [0u32, 1, 2, 3];
        let bad = CgPair {
            chosen: long.as_ptr(),
            ..bad
        };
        assert_eq!(
            cg_lp_dpo_loss(policy, reference, &bad, 1.0, 0.01, &mut loss),
            CgStatus::InvalidArgument
        );

        cg_policy_free(policy);
        cg_policy_free(reference);
        cg_policy_free(ptr::null_mut());
    }
}

#[test]
fn store_lifecycle() {
    unsafe {
        let mut store = ptr::null_mut();
        assert_eq!(cg_store_new(6, 5, 2, 0.9, 3, 0, &mut store), CgStatus::Ok);
        let mut snap = vec![0.0; 30];
        assert_eq!(cg_store_snapshot(store, snap.as_mut_ptr(), 30), CgStatus::EmptyStore);

        let g = DenseMatrix::outer(&[1.0, 2.0, 0.0, -1.0, 0.5, 3.0], &[1.0, -1.0, 2.0, 0.0, 1.0]);
        for _ in 0..3 {
            assert_eq!(cg_store_update(store, g.as_slice().as_ptr(), 30), CgStatus::Ok);
        }
        let mut step = 0;
        assert_eq!(cg_store_step(store, &mut step), CgStatus::Ok);
        assert_eq!(step, 3);
        assert_eq!(cg_store_snapshot(store, snap.as_mut_ptr(), 30), CgStatus::Ok);
        let c = cosine(&snap, g.as_slice()).value;
        assert!(c > 1.0 - 1e-12, "{c}");

        assert_eq!(
            cg_store_update(store, g.as_slice().as_ptr(), 29),
            CgStatus::ShapeMismatch
        );
        let nan = vec![f64::NAN; 30];
        assert_eq!(cg_store_update(store, nan.as_ptr(), 30), CgStatus::NonFinite);
        assert_eq!(cg_store_step(store, &mut step), CgStatus::Ok);
        assert_eq!(step, 3);
        cg_store_free(store);
    }
}
