//! C interface to graphormer-kit.
//!
//! Objects cross the boundary as opaque handles created by `gk_*_new` /
//! `gk_*_load` and released with the matching `gk_*_free`. Every fallible
//! function returns a [`GkStatus`]; on failure a description is available
//! from [`gk_last_error`] on the same thread until the next failing call.
//! Panics are caught and reported as [`GkStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use graphormer_kit::expressiveness::run_express_checks;
use graphormer_kit::graph::{shortest_path_distances, wl1_equivalent, Graph};
use graphormer_kit::model::{Model, PreparedGraph};
use graphormer_kit::training::Checkpoint;
use graphormer_kit::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidGraph = 3,
    Io = 4,
    Parse = 5,
    Checkpoint = 6,
    Numeric = 7,
    Panic = 8,
}

/// A graph with integer node and edge features.
pub struct GkGraph {
    graph: Graph,
}

/// A trained model loaded from a checkpoint.
pub struct GkModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GkStatus {
    match e {
        Error::InvalidGraph(_) | Error::VirtualNodeAttached | Error::IndexOutOfRange { .. } => GkStatus::InvalidGraph,
        Error::Io(_) => GkStatus::Io,
        Error::Parse { .. } => GkStatus::Parse,
        Error::Checkpoint(_) => GkStatus::Checkpoint,
        Error::Config(_) | Error::EmptyDataset(_) => GkStatus::InvalidArgument,
        Error::Shape { .. }
        | Error::FullyMaskedRow { .. }
        | Error::NonFiniteGradient { .. }
        | Error::Diverged { .. } => GkStatus::Numeric,
    }
}

struct Failure(GkStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(GkStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GkStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GkStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or points to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a graph. `edges` holds `num_edges` (source, target) pairs.
/// `node_feats` is row-major `[num_nodes, node_slots]` and `edge_feats`
/// `[num_edges, edge_slots]`; either may be null when its slot count is 0.
///
/// # Safety
/// Every non-null pointer must reference the number of values stated above,
/// and `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gk_graph_new(
    num_nodes: usize,
    directed: bool,
    edges: *const usize,
    num_edges: usize,
    node_feats: *const usize,
    node_slots: usize,
    edge_feats: *const usize,
    edge_slots: usize,
    out: *mut *mut GkGraph,
) -> GkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let pairs = slice(edges, num_edges * 2, "edges")?;
        let nf = slice(node_feats, num_nodes * node_slots, "node_feats")?;
        let ef = slice(edge_feats, num_edges * edge_slots, "edge_feats")?;
        let rows = |data: &[usize], count: usize, width: usize| -> Vec<Vec<usize>> {
            (0..count).map(|i| data[i * width..(i + 1) * width].to_vec()).collect()
        };
        let graph = Graph::with_features(
            num_nodes,
            directed,
            pairs.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
            rows(nf, num_nodes, node_slots),
            rows(ef, num_edges, edge_slots),
        )?;
        *out = Box::into_raw(Box::new(GkGraph { graph }));
        Ok(())
    })
}

/// # Safety
/// `graph` is null or was returned by [`gk_graph_new`] and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gk_graph_free(graph: *mut GkGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `graph` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gk_graph_num_nodes(graph: *const GkGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.graph.num_nodes())
}

/// Write the `n * n` shortest-path distances (row-major, -1 when
/// unreachable) into `out`, which holds `len` values.
///
/// # Safety
/// `graph` is a live handle and `out` has room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn gk_graph_spd(graph: *const GkGraph, out: *mut i32, len: usize) -> GkStatus {
    guard(|| {
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.graph;
        let n = g.num_nodes();
        if len < n * n {
            return Err(Failure(GkStatus::InvalidArgument, format!("buffer holds {len} values, need {}", n * n)));
        }
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        let spd = shortest_path_distances(g);
        ptr::copy_nonoverlapping(spd.as_slice().as_ptr(), out, n * n);
        Ok(())
    })
}

/// Whether 1-WL refinement fails to tell the graphs apart.
///
/// # Safety
/// `a` and `b` are live handles and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gk_wl_equivalent(a: *const GkGraph, b: *const GkGraph, out: *mut bool) -> GkStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = wl1_equivalent(&a.graph, &b.graph);
        Ok(())
    })
}

/// Load the model stored in a checkpoint file.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gk_model_load(path: *const c_char, out: *mut *mut GkModel) -> GkStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(GkStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(GkModel { model: ck.model }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or was returned by [`gk_model_load`] and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gk_model_free(model: *mut GkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predict one value per graph (a logit for binary models).
///
/// # Safety
/// `graphs` points to `count` live graph handles and `out` has room for
/// `count` values.
#[no_mangle]
pub unsafe extern "C" fn gk_model_predict(
    model: *const GkModel,
    graphs: *const *const GkGraph,
    count: usize,
    out: *mut f64,
) -> GkStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let handles = slice(graphs, count, "graphs")?;
        let mut prepared = Vec::with_capacity(count);
        for (i, &h) in handles.iter().enumerate() {
            let g = &h.as_ref().ok_or_else(|| null("graph handle"))?.graph;
            g.validate(&m.vocab).map_err(|e| Failure(status_of(&e), format!("graph {i}: {e}")))?;
            prepared.push(PreparedGraph::new(g.clone(), m.config.max_path_len)?);
        }
        let preds = m.predict_all(&prepared, 64)?;
        if count > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            ptr::copy_nonoverlapping(preds.as_ptr(), out, count);
        }
        Ok(())
    })
}

/// Run the construction checks; writes the number passed and the total.
///
/// # Safety
/// `passed` and `total` are writable.
#[no_mangle]
pub unsafe extern "C" fn gk_express_check(seed: u64, passed: *mut u32, total: *mut u32) -> GkStatus {
    guard(|| {
        let passed = passed.as_mut().ok_or_else(|| null("passed"))?;
        let total = total.as_mut().ok_or_else(|| null("total"))?;
        let report = run_express_checks(seed)?;
        *passed = report.passed_count() as u32;
        *total = report.rows.len() as u32;
        Ok(())
    })
}
