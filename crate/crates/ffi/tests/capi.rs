use std::ffi::{CStr, CString};
use std::ptr;

use fedsda::diffusion::{
    sample_many, save_model, write_model, DiffusionModel, Standardizer, VarianceSchedule,
};
use fedsda::io::{synthesize, SyntheticSpec};
use fedsda::metrics::{frechet_distance, ssim, summarize_stain_set};
use fedsda::nn::DenoiserArch;
use fedsda::rng::{derive, Domain};
use fedsda::stain::{reconstruct, separate, RgbImage, SeparationParams, StainMatrix};
use fedsda_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model() -> DiffusionModel {
    DiffusionModel::init(
        DenoiserArch::transformer(2),
        VarianceSchedule::default(),
        Standardizer::default(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap()
}

fn fixture() -> Vec<RgbImage> {
    let spec = SyntheticSpec {
        images_per_client: 2,
        width: 32,
        height: 24,
        ..SyntheticSpec::with_clients(1)
    };
    synthesize(&spec, 4).unwrap().remove(0).images
}

fn last_error() -> Option<String> {
    let p = fedsda_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

#[test]
fn separate_and_reconstruct_match_the_library() {
    let img = &fixture()[0];
    let (w, h) = (img.width(), img.height());
    let mut stains = [0.0; 6];
    let mut density = vec![0.0; 2 * w * h];
    let status = unsafe {
        fedsda_separate(
            img.pixels().as_ptr(),
            w,
            h,
            0.02,
            100,
            1e-6,
            stains.as_mut_ptr(),
            density.as_mut_ptr(),
        )
    };
    assert_eq!(status, FedsdaStatus::Ok);
    assert!(last_error().is_none());
    let sep = separate(img, &SeparationParams::default()).unwrap();
    assert_eq!(stains, sep.stains.to_column_major());
    assert_eq!(density, sep.density.values());

    let mut rgb = vec![0u8; 3 * w * h];
    let status =
        unsafe { fedsda_reconstruct(stains.as_ptr(), density.as_ptr(), w, h, rgb.as_mut_ptr()) };
    assert_eq!(status, FedsdaStatus::Ok);
    assert_eq!(
        rgb,
        reconstruct(&sep.stains, &sep.density, w, h)
            .unwrap()
            .pixels()
    );

    // Density output is optional.
    let status = unsafe {
        fedsda_separate(
            img.pixels().as_ptr(),
            w,
            h,
            0.02,
            100,
            1e-6,
            stains.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, FedsdaStatus::Ok);
}

#[test]
fn separation_errors_are_reported() {
    let white = vec![255u8; 3 * 16 * 16];
    let mut stains = [0.0; 6];
    let status = unsafe {
        fedsda_separate(
            white.as_ptr(),
            16,
            16,
            0.02,
            100,
            1e-6,
            stains.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, FedsdaStatus::Degenerate);
    assert!(last_error().unwrap().contains("degenerate"));

    let status = unsafe {
        fedsda_separate(
            ptr::null(),
            16,
            16,
            0.02,
            100,
            1e-6,
            stains.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, FedsdaStatus::NullPointer);
    let status = unsafe {
        fedsda_separate(
            white.as_ptr(),
            16,
            16,
            -1.0,
            100,
            1e-6,
            stains.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, FedsdaStatus::InvalidArgument);
    let status = unsafe {
        fedsda_separate(
            white.as_ptr(),
            0,
            16,
            0.02,
            100,
            1e-6,
            stains.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, FedsdaStatus::InvalidArgument);
}

#[test]
fn model_handles_sample_like_the_library() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_model(&m, &path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut handle: *mut FedsdaModel = ptr::null_mut();
    assert_eq!(
        unsafe { fedsda_model_load(cpath.as_ptr(), &mut handle) },
        FedsdaStatus::Ok
    );
    assert!(!handle.is_null());
    let mut k = 0usize;
    assert_eq!(
        unsafe { fedsda_model_num_conditions(handle, &mut k) },
        FedsdaStatus::Ok
    );
    assert_eq!(k, 2);

    let mut out = vec![0.0; 6 * 5];
    assert_eq!(
        unsafe { fedsda_model_sample(handle, 2, 5, 77, out.as_mut_ptr()) },
        FedsdaStatus::Ok
    );
    let expect = sample_many(&m, 2, 5, &mut derive(77, Domain::Sampling, 2, 0)).unwrap();
    let got: Vec<StainMatrix> = out
        .chunks_exact(6)
        .map(|c| StainMatrix::from_column_major(c.try_into().unwrap()).unwrap())
        .collect();
    assert_eq!(got, expect);

    assert_eq!(
        unsafe { fedsda_model_sample(handle, 3, 1, 0, out.as_mut_ptr()) },
        FedsdaStatus::InvalidArgument
    );
    assert!(last_error().unwrap().contains("condition 3"));
    unsafe { fedsda_model_free(handle) };
    unsafe { fedsda_model_free(ptr::null_mut()) };
}

#[test]
fn models_load_from_bytes_and_reject_garbage() {
    let mut bytes = Vec::new();
    write_model(&model(), &mut bytes).unwrap();
    let mut handle: *mut FedsdaModel = ptr::null_mut();
    assert_eq!(
        unsafe { fedsda_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut handle) },
        FedsdaStatus::Ok
    );
    unsafe { fedsda_model_free(handle) };

    let mut handle: *mut FedsdaModel = ptr::null_mut();
    let junk = b"not a model";
    assert_eq!(
        unsafe { fedsda_model_from_bytes(junk.as_ptr(), junk.len(), &mut handle) },
        FedsdaStatus::Format
    );
    assert!(handle.is_null());

    let missing = CString::new("/nonexistent/model.bin").unwrap();
    assert_eq!(
        unsafe { fedsda_model_load(missing.as_ptr(), &mut handle) },
        FedsdaStatus::Io
    );
    assert_eq!(
        unsafe { fedsda_model_load(ptr::null(), &mut handle) },
        FedsdaStatus::NullPointer
    );
}

#[test]
fn metrics_match_the_library() {
    let imgs = fixture();
    let (w, h) = (imgs[0].width(), imgs[0].height());
    let mut v = 0.0;
    assert_eq!(
        unsafe {
            fedsda_ssim(
                imgs[0].pixels().as_ptr(),
                imgs[1].pixels().as_ptr(),
                w,
                h,
                &mut v,
            )
        },
        FedsdaStatus::Ok
    );
    assert_eq!(v, ssim(&imgs[0], &imgs[1]).unwrap());
    assert_eq!(
        unsafe {
            fedsda_wd(
                imgs[0].pixels().as_ptr(),
                imgs[0].pixels().as_ptr(),
                w,
                h,
                &mut v,
            )
        },
        FedsdaStatus::Ok
    );
    assert_eq!(v, 0.0);

    let spec = SyntheticSpec::with_clients(2);
    let a = fedsda::io::sample_client_stains(&spec, 1, 30, 2).unwrap();
    let b = fedsda::io::sample_client_stains(&spec, 2, 20, 2).unwrap();
    let flat = |s: &[StainMatrix]| {
        s.iter()
            .flat_map(|m| m.to_column_major())
            .collect::<Vec<_>>()
    };
    let (fa, fb) = (flat(&a), flat(&b));
    assert_eq!(
        unsafe { fedsda_fd(fa.as_ptr(), 30, fb.as_ptr(), 20, &mut v) },
        FedsdaStatus::Ok
    );
    let expect = frechet_distance(
        &summarize_stain_set(&a).unwrap(),
        &summarize_stain_set(&b).unwrap(),
    )
    .unwrap();
    assert_eq!(v, expect);
    assert_eq!(
        unsafe { fedsda_fd(fa.as_ptr(), 1, fb.as_ptr(), 20, &mut v) },
        FedsdaStatus::InvalidArgument
    );
    let mut bad = fa.clone();
    bad[0] = -1.0;
    assert_ne!(
        unsafe { fedsda_fd(bad.as_ptr(), 30, fb.as_ptr(), 20, &mut v) },
        FedsdaStatus::Ok
    );
}

#[test]
fn header_declares_the_api() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fedsda.h")).unwrap();
    for name in [
        "FEDSDA_STATUS_OK",
        "FEDSDA_STATUS_DEGENERATE",
        "typedef struct FedsdaModel FedsdaModel",
        "fedsda_last_error",
        "fedsda_separate",
        "fedsda_reconstruct",
        "fedsda_model_load",
        "fedsda_model_from_bytes",
        "fedsda_model_free",
        "fedsda_model_sample",
        "fedsda_fd",
        "fedsda_wd",
        "fedsda_ssim",
    ] {
        assert!(header.contains(name), "{name}");
    }
    let version = unsafe { CStr::from_ptr(fedsda_version()) }
        .to_str()
        .unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
