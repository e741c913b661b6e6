//! C ABI over the specmatch library.
//!
//! Meshes and bases are opaque handles owned by the caller and released with
//! the matching `*_free` function. Matrices cross the boundary as row-major
//! `double` arrays, point maps as `size_t` arrays. Every fallible function
//! returns an [`SpmStatus`]; the message of the last failure on the calling
//! thread is available from [`spm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::{DMatrix, Point3};
use specmatch::error::{Error, ErrorKind};
use specmatch::eval::geodesic_error;
use specmatch::fmap::{solve_fmap, solve_fmap_regularized};
use specmatch::pointmap::{fmap_to_p2p, icp_refine, p2p_to_fmap, PointMap};
use specmatch::{compute_basis, load_mesh, LaplaceBasis, TriangleMesh};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpmStatus {
    Ok = 0,
    /// Invalid argument or parameter.
    Usage = 1,
    /// Malformed or inconsistent input data.
    Data = 2,
    /// Solver or factorization failure.
    Numerical = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// Internal panic caught at the boundary.
    Panic = 5,
}

/// Opaque triangle mesh.
pub struct SpmMesh(TriangleMesh);

/// Opaque Laplace basis.
pub struct SpmBasis(LaplaceBasis);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpmStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            match e.kind() {
                ErrorKind::Usage => SpmStatus::Usage,
                ErrorKind::Data => SpmStatus::Data,
                ErrorKind::Numerical => SpmStatus::Numerical,
            }
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SpmStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SpmStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn write_matrix(m: &DMatrix<f64>, out: &mut [f64]) {
    let cols = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..cols {
            out[r * cols + c] = m[(r, c)];
        }
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn spm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads an OFF or OBJ file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spm_mesh_load(path: *const c_char, out: *mut *mut SpmMesh) -> SpmStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidParameter("path is not valid UTF-8".into()))?;
        let mesh = load_mesh(Path::new(path), None)?;
        *out = Box::into_raw(Box::new(SpmMesh(mesh)));
        Ok(())
    })
}

/// Builds a mesh from `num_vertices × 3` coordinates and `num_faces × 3`
/// vertex indices.
///
/// # Safety
/// Arrays must hold the stated number of elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spm_mesh_from_arrays(
    vertices: *const f64,
    num_vertices: usize,
    faces: *const usize,
    num_faces: usize,
    out: *mut *mut SpmMesh,
) -> SpmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let v = slice(vertices, num_vertices * 3, "vertices")?;
        let f = slice(faces, num_faces * 3, "faces")?;
        let verts = v.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
        let tris = f.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mesh = TriangleMesh::new(verts, tris, "ffi")?;
        *out = Box::into_raw(Box::new(SpmMesh(mesh)));
        Ok(())
    })
}

/// # Safety
/// `mesh` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spm_mesh_free(mesh: *mut SpmMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Vertex count, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spm_mesh_num_vertices(mesh: *const SpmMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.num_vertices())
}

/// Total surface area, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spm_mesh_area(mesh: *const SpmMesh) -> f64 {
    mesh.as_ref().map_or(0.0, |m| m.0.total_area())
}

/// The `k` lowest Laplace–Beltrami eigenpairs (`0 < k < n`).
///
/// # Safety
/// `mesh` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn spm_basis_compute(mesh: *const SpmMesh, k: usize, out: *mut *mut SpmBasis) -> SpmStatus {
    guard(|| {
        let mesh = handle(mesh, "mesh")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let basis = compute_basis(&mesh.0, k)?;
        *out = Box::into_raw(Box::new(SpmBasis(basis)));
        Ok(())
    })
}

/// # Safety
/// `basis` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spm_basis_free(basis: *mut SpmBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spm_basis_k(basis: *const SpmBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.0.k())
}

/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spm_basis_num_vertices(basis: *const SpmBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.0.num_vertices())
}

/// Copies the `k` eigenvalues into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spm_basis_eigenvalues(basis: *const SpmBasis, out: *mut f64, len: usize) -> SpmStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.0;
        if len != b.k() {
            return Err(Error::DimensionMismatch {
                context: "eigenvalue buffer",
                expected: b.k(),
                actual: len,
            }
            .into());
        }
        slice_mut(out, len, "out")?.copy_from_slice(b.eigenvalues());
        Ok(())
    })
}

/// Copies the `n × k` eigenfunctions, row-major, into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spm_basis_eigenfunctions(basis: *const SpmBasis, out: *mut f64, len: usize) -> SpmStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.0;
        let want = b.num_vertices() * b.k();
        if len != want {
            return Err(Error::DimensionMismatch {
                context: "eigenfunction buffer",
                expected: want,
                actual: len,
            }
            .into());
        }
        write_matrix(b.eigenfunctions(), slice_mut(out, len, "out")?);
        Ok(())
    })
}

/// Least-squares map from `k1 × d` coefficients `a1` to `k2 × d`
/// coefficients `a2`; writes the `k2 × k1` map to `out`.
///
/// # Safety
/// Arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn spm_fmap_solve(
    a1: *const f64,
    k1: usize,
    a2: *const f64,
    k2: usize,
    d: usize,
    out: *mut f64,
) -> SpmStatus {
    guard(|| {
        let a1 = DMatrix::from_row_slice(k1, d, slice(a1, k1 * d, "a1")?);
        let a2 = DMatrix::from_row_slice(k2, d, slice(a2, k2 * d, "a2")?);
        let c = solve_fmap(&a1, &a2)?;
        write_matrix(&c, slice_mut(out, k1 * k2, "out")?);
        Ok(())
    })
}

/// Like [`spm_fmap_solve`] with an added Laplacian commutativity term of
/// weight `alpha`.
///
/// # Safety
/// Arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn spm_fmap_solve_regularized(
    a1: *const f64,
    k1: usize,
    a2: *const f64,
    k2: usize,
    d: usize,
    evals1: *const f64,
    evals2: *const f64,
    alpha: f64,
    out: *mut f64,
) -> SpmStatus {
    guard(|| {
        let a1 = DMatrix::from_row_slice(k1, d, slice(a1, k1 * d, "a1")?);
        let a2 = DMatrix::from_row_slice(k2, d, slice(a2, k2 * d, "a2")?);
        let l1 = slice(evals1, k1, "evals1")?;
        let l2 = slice(evals2, k2, "evals2")?;
        let c = solve_fmap_regularized(&a1, &a2, l1, l2, alpha)?;
        write_matrix(&c, slice_mut(out, k1 * k2, "out")?);
        Ok(())
    })
}

/// Point map `T: S2 → S1` from a `k2 × k1` functional map; `out` holds one
/// source index per vertex of `basis2`.
///
/// # Safety
/// `c` must hold `k2 * k1` doubles and `out` `out_len` entries.
#[no_mangle]
pub unsafe extern "C" fn spm_fmap_to_p2p(
    c: *const f64,
    k2: usize,
    k1: usize,
    basis1: *const SpmBasis,
    basis2: *const SpmBasis,
    out: *mut usize,
    out_len: usize,
) -> SpmStatus {
    guard(|| {
        let (b1, b2) = (&handle(basis1, "basis1")?.0, &handle(basis2, "basis2")?.0);
        check_len("point map buffer", b2.num_vertices(), out_len)?;
        let c = DMatrix::from_row_slice(k2, k1, slice(c, k1 * k2, "c")?);
        let t = fmap_to_p2p(&c, b1, b2)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(&t.target_to_source);
        Ok(())
    })
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<(), Failure> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
        .into());
    }
    Ok(())
}

/// Functional map (`k2 × k1`, full basis sizes) induced by a point map.
///
/// # Safety
/// `map` must hold `map_len` entries and `out` `k2 * k1` doubles.
#[no_mangle]
pub unsafe extern "C" fn spm_p2p_to_fmap(
    map: *const usize,
    map_len: usize,
    basis1: *const SpmBasis,
    basis2: *const SpmBasis,
    out: *mut f64,
) -> SpmStatus {
    guard(|| {
        let (b1, b2) = (&handle(basis1, "basis1")?.0, &handle(basis2, "basis2")?.0);
        let t = PointMap::new(slice(map, map_len, "map")?.to_vec(), b1.num_vertices())?;
        let c = p2p_to_fmap(&t, b1, b2)?;
        write_matrix(&c, slice_mut(out, b1.k() * b2.k(), "out")?);
        Ok(())
    })
}

/// Spectral ICP on a square `k × k` map. Writes the refined map to `c_out`
/// and the point map to `map_out` (one entry per vertex of `basis2`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn spm_icp_refine(
    c_in: *const f64,
    k: usize,
    basis1: *const SpmBasis,
    basis2: *const SpmBasis,
    max_iters: usize,
    c_out: *mut f64,
    map_out: *mut usize,
    map_len: usize,
) -> SpmStatus {
    guard(|| {
        let (b1, b2) = (&handle(basis1, "basis1")?.0, &handle(basis2, "basis2")?.0);
        check_len("point map buffer", b2.num_vertices(), map_len)?;
        let c = DMatrix::from_row_slice(k, k, slice(c_in, k * k, "c_in")?);
        let r = icp_refine(&c, b1, b2, max_iters, 0.0)?;
        write_matrix(&r.fmap, slice_mut(c_out, k * k, "c_out")?);
        slice_mut(map_out, map_len, "map_out")?.copy_from_slice(&r.map.target_to_source);
        Ok(())
    })
}

/// Summary of normalized geodesic errors of `map` against `gt`, both
/// pointing into `source`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpmErrorSummary {
    pub mean: f64,
    pub percentile95: f64,
    pub max: f64,
    pub unreachable: usize,
}

/// # Safety
/// `map` and `gt` must hold `len` entries; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spm_geodesic_error(
    source: *const SpmMesh,
    map: *const usize,
    gt: *const usize,
    len: usize,
    out: *mut SpmErrorSummary,
) -> SpmStatus {
    guard(|| {
        let mesh = &handle(source, "source")?.0;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let n = mesh.num_vertices();
        let m = PointMap::new(slice(map, len, "map")?.to_vec(), n)?;
        let g = PointMap::new(slice(gt, len, "gt")?.to_vec(), n)?;
        let r = geodesic_error(&m, &g, mesh)?;
        *out = SpmErrorSummary {
            mean: r.mean,
            percentile95: r.percentile95,
            max: r.max,
            unreachable: r.unreachable,
        };
        Ok(())
    })
}
