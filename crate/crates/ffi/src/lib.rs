//! C ABI over the texfield library.
//!
//! Objects are opaque handles created by `*_load`/`*_encode` calls and released with
//! the matching `*_free`. Every fallible call returns a [`TexfieldStatus`]; on failure
//! [`texfield_last_error`] describes the most recent error on the calling thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use texfield::bake::{bake_uv, point_psnr, BakeOptions};
use texfield::pipeline::Asset;
use texfield::vae::{LatentField, Vae};
use texfield::nnkit::Checkpoint;
use texfield::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TexfieldStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Geometry = 6,
    Shape = 7,
    Image = 8,
    Panic = 9,
}

/// A trained VAE (single precision).
pub struct TexfieldVae(Vae<f32>);

/// A curated mesh ready for sampling and baking.
pub struct TexfieldMesh(Asset);

/// Per-voxel latent codes.
pub struct TexfieldLatent(LatentField);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TexfieldStatus {
    match e {
        Error::Io { .. } => TexfieldStatus::Io,
        Error::UnsupportedFormat(_) | Error::Parse(_) => TexfieldStatus::Parse,
        Error::Checkpoint(_) => TexfieldStatus::Checkpoint,
        Error::FaceIndex { .. } | Error::Degenerate(_) | Error::AllFacesRemoved | Error::EmptyVoxel(_) => {
            TexfieldStatus::Geometry
        }
        Error::Shape(_) => TexfieldStatus::Shape,
        Error::Image(_) => TexfieldStatus::Image,
        Error::Domain(_) | Error::InvalidArgument(_) | Error::NonFinite(_) | Error::Config(_) => {
            TexfieldStatus::InvalidArgument
        }
    }
}

struct Fail(TexfieldStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TexfieldStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TexfieldStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            TexfieldStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(TexfieldStatus::NullPointer, "path is null".into()));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TexfieldStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(TexfieldStatus::NullPointer, format!("{what} handle is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(TexfieldStatus::NullPointer, format!("{what} output pointer is null")))
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn texfield_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn texfield_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn texfield_vae_load(path: *const c_char, out: *mut *mut TexfieldVae) -> TexfieldStatus {
    guard(|| {
        let out = out_ptr(out, "vae")?;
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TexfieldVae(Vae::from_checkpoint(&ckpt)?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn texfield_vae_free(vae: *mut TexfieldVae) {
    if !vae.is_null() {
        drop(Box::from_raw(vae));
    }
}

/// Loads and curates a mesh (OBJ or PLY with UVs for baking).
#[no_mangle]
pub unsafe extern "C" fn texfield_mesh_load(path: *const c_char, out: *mut *mut TexfieldMesh) -> TexfieldStatus {
    guard(|| {
        let out = out_ptr(out, "mesh")?;
        let asset = Asset::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TexfieldMesh(asset)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn texfield_mesh_free(mesh: *mut TexfieldMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Face count of a curated mesh, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn texfield_mesh_face_count(mesh: *const TexfieldMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.mesh.faces.len())
}

/// Samples `count` surface points and encodes them into a latent at `resolution`.
#[no_mangle]
pub unsafe extern "C" fn texfield_encode(
    vae: *const TexfieldVae,
    mesh: *const TexfieldMesh,
    count: usize,
    resolution: u32,
    seed: u64,
    monochrome: bool,
    out: *mut *mut TexfieldLatent,
) -> TexfieldStatus {
    guard(|| {
        let vae = &handle(vae, "vae")?.0;
        let asset = &handle(mesh, "mesh")?.0;
        let out = out_ptr(out, "latent")?;
        let samples = asset.sample(count, seed, "sample", monochrome)?;
        let latent = vae.encode(&samples, resolution, asset.seed(seed, "encode"), monochrome)?;
        *out = Box::into_raw(Box::new(TexfieldLatent(latent)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn texfield_latent_load(path: *const c_char, out: *mut *mut TexfieldLatent) -> TexfieldStatus {
    guard(|| {
        let out = out_ptr(out, "latent")?;
        let latent = LatentField::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TexfieldLatent(latent)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn texfield_latent_save(latent: *const TexfieldLatent, path: *const c_char) -> TexfieldStatus {
    guard(|| {
        let latent = &handle(latent, "latent")?.0;
        latent.save(&path_arg(path)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn texfield_latent_free(latent: *mut TexfieldLatent) {
    if !latent.is_null() {
        drop(Box::from_raw(latent));
    }
}

/// Number of active voxels, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn texfield_latent_voxel_count(latent: *const TexfieldLatent) -> usize {
    latent.as_ref().map_or(0, |l| l.0.len())
}

/// Latent channels per voxel, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn texfield_latent_dim(latent: *const TexfieldLatent) -> usize {
    latent.as_ref().map_or(0, |l| l.0.dim)
}

/// Queries the color field at `count` points (`xyz` holds `3 * count` doubles).
/// Writes `3 * count` RGB values to `rgb` and one flag per point to `valid`
/// (0 where the point lies outside every active voxel, whose color is left at 0).
#[no_mangle]
pub unsafe extern "C" fn texfield_query_colors(
    vae: *const TexfieldVae,
    latent: *const TexfieldLatent,
    xyz: *const f64,
    count: usize,
    rgb: *mut f64,
    valid: *mut u8,
) -> TexfieldStatus {
    guard(|| {
        let vae = &handle(vae, "vae")?.0;
        let latent = &handle(latent, "latent")?.0;
        if count == 0 {
            return Ok(());
        }
        if xyz.is_null() || rgb.is_null() || valid.is_null() {
            return Err(Fail(TexfieldStatus::NullPointer, "point or output buffer is null".into()));
        }
        let input = std::slice::from_raw_parts(xyz, 3 * count);
        let rgb = std::slice::from_raw_parts_mut(rgb, 3 * count);
        let valid = std::slice::from_raw_parts_mut(valid, count);
        let points: Vec<[f64; 3]> = input.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let colors = vae.color_field(latent)?.query(&points);
        for (i, c) in colors.into_iter().enumerate() {
            valid[i] = u8::from(c.is_some());
            rgb[3 * i..3 * i + 3].copy_from_slice(&c.unwrap_or([0.0; 3]));
        }
        Ok(())
    })
}

/// Bakes the latent's color field into a `width x height` RGBA PNG using the mesh's UVs.
#[no_mangle]
pub unsafe extern "C" fn texfield_bake_png(
    vae: *const TexfieldVae,
    latent: *const TexfieldLatent,
    mesh: *const TexfieldMesh,
    width: usize,
    height: usize,
    supersamples: usize,
    seed: u64,
    v_flip: bool,
    path: *const c_char,
) -> TexfieldStatus {
    guard(|| {
        let vae = &handle(vae, "vae")?.0;
        let latent = &handle(latent, "latent")?.0;
        let asset = &handle(mesh, "mesh")?.0;
        let path = path_arg(path)?;
        let opts = BakeOptions { width, height, supersamples, seed, ..BakeOptions::default() };
        let field = vae.color_field(latent)?;
        bake_uv(&asset.mesh, &field, &opts)?.texture.save_png(&path, v_flip)?;
        Ok(())
    })
}

/// Point-space PSNR of the latent's colors against the mesh's true colors at
/// `count` held-out surface samples.
#[no_mangle]
pub unsafe extern "C" fn texfield_heldout_psnr(
    vae: *const TexfieldVae,
    latent: *const TexfieldLatent,
    mesh: *const TexfieldMesh,
    count: usize,
    seed: u64,
    out: *mut f64,
) -> TexfieldStatus {
    guard(|| {
        let vae = &handle(vae, "vae")?.0;
        let latent = &handle(latent, "latent")?.0;
        let asset = &handle(mesh, "mesh")?.0;
        let out = out_ptr(out, "psnr")?;
        let held = asset.sample(count, seed, "heldout", false)?;
        let points: Vec<[f64; 3]> = held.iter().map(|s| s.position).collect();
        let truth: Vec<[f64; 3]> = held.iter().map(|s| s.color).collect();
        let pred = vae.color_field(latent)?.query_all(&points)?;
        *out = point_psnr(&pred, &truth)?.psnr;
        Ok(())
    })
}
