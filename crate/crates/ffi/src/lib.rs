//! C ABI over `treeqa-core`.
//!
//! Handles are opaque pointers created by `*_parse`/`*_load`/`*_new`
//! functions and released with the matching `*_free`. Every fallible
//! function returns a [`TreeqaStatus`]; on failure a message is available
//! from [`treeqa_last_error`] on the same thread. Strings handed out by the
//! library are NUL-terminated UTF-8 and must be released with
//! [`treeqa_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use treeqa_core::config::RunConfig;
use treeqa_core::engine::Engine;
use treeqa_core::knowledge::KgStore;
use treeqa_core::plan::{parse_art, post_order, serialize_art, validate_art, Art, PlanError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeqaStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Input text could not be parsed.
    Parse = 3,
    /// A plan parsed but broke a structural rule.
    InvalidPlan = 4,
    Config = 5,
    Io = 6,
    /// The engine could not produce an answer.
    Engine = 7,
    /// A caller-provided buffer was too small; the needed length was
    /// still written.
    BufferTooSmall = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
}

pub struct TreeqaArt {
    art: Art,
}

pub struct TreeqaKg {
    store: KgStore,
}

pub struct TreeqaEngine {
    engine: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(TreeqaStatus, String);

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TreeqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TreeqaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside treeqa".into());
            TreeqaStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(TreeqaStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(TreeqaStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(TreeqaStatus::NullArgument, format!("{what} is NULL")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(TreeqaStatus::NullArgument, format!("{what} is NULL")));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|e| Fail(TreeqaStatus::Parse, e.to_string()))?;
    put(out, c.into_raw(), "out")
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn treeqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by the library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn treeqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a plan document (JSON). Malformed JSON gives
/// `TREEQA_STATUS_PARSE`; a well-formed document describing a broken tree
/// gives `TREEQA_STATUS_INVALID_PLAN`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_art_parse(json: *const c_char, out: *mut *mut TreeqaArt) -> TreeqaStatus {
    guard(|| {
        let art = parse_art(text(json, "json")?).map_err(|e| {
            let status = match e {
                PlanError::Schema(_) => TreeqaStatus::Parse,
                _ => TreeqaStatus::InvalidPlan,
            };
            Fail(status, e.to_string())
        })?;
        put(out, Box::into_raw(Box::new(TreeqaArt { art })), "out")
    })
}

/// # Safety
/// `art` must come from `treeqa_art_parse` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn treeqa_art_free(art: *mut TreeqaArt) {
    if !art.is_null() {
        drop(Box::from_raw(art));
    }
}

/// Number of nodes, or 0 for NULL.
///
/// # Safety
/// `art` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn treeqa_art_len(art: *const TreeqaArt) -> usize {
    art.as_ref().map_or(0, |a| a.art.len())
}

/// Writes the canonical plan document to `*out`.
///
/// # Safety
/// `art` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_art_serialize(art: *const TreeqaArt, out: *mut *mut c_char) -> TreeqaStatus {
    guard(|| put_string(out, serialize_art(&handle(art, "art")?.art)))
}

/// Checks the tree. Handles from `treeqa_art_parse` are always valid, so
/// this mainly reports the rule list for display. Returns `TREEQA_STATUS_INVALID_PLAN` when any rule is
/// broken; `*violations` (if not NULL) receives a JSON array of messages
/// either way.
///
/// # Safety
/// `art` must be a live handle; `violations` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_art_validate(art: *const TreeqaArt, violations: *mut *mut c_char) -> TreeqaStatus {
    guard(|| {
        let found: Vec<String> = validate_art(&handle(art, "art")?.art).iter().map(ToString::to_string).collect();
        if !violations.is_null() {
            put_string(violations, serde_json::to_string(&found).expect("strings serialize"))?;
        }
        if found.is_empty() {
            Ok(())
        } else {
            Err(Fail(TreeqaStatus::InvalidPlan, found.join("; ")))
        }
    })
}

/// Fills `buf` with the execution order (children before parents).
/// `*len` always receives the node count.
///
/// # Safety
/// `buf` must hold `cap` elements (may be NULL when `cap` is 0); `len`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_art_post_order(
    art: *const TreeqaArt,
    buf: *mut usize,
    cap: usize,
    len: *mut usize,
) -> TreeqaStatus {
    guard(|| {
        let order = post_order(&handle(art, "art")?.art);
        put(len, order.len(), "len")?;
        if order.len() > cap {
            return Err(Fail(TreeqaStatus::BufferTooSmall, format!("need {} slots", order.len())));
        }
        if !order.is_empty() {
            if buf.is_null() {
                return Err(Fail(TreeqaStatus::NullArgument, "buf is NULL".into()));
            }
            std::ptr::copy_nonoverlapping(order.as_ptr(), buf, order.len());
        }
        Ok(())
    })
}

/// Loads a KG dump (JSONL).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_kg_load(path: *const c_char, out: *mut *mut TreeqaKg) -> TreeqaStatus {
    guard(|| {
        let path = text(path, "path")?;
        let store = KgStore::load_jsonl(Path::new(path)).map_err(|e| {
            let status = match e {
                treeqa_core::knowledge::KgError::Io(_) => TreeqaStatus::Io,
                _ => TreeqaStatus::Parse,
            };
            Fail(status, e.to_string())
        })?;
        put(out, Box::into_raw(Box::new(TreeqaKg { store })), "out")
    })
}

/// # Safety
/// `kg` must come from `treeqa_kg_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn treeqa_kg_free(kg: *mut TreeqaKg) {
    if !kg.is_null() {
        drop(Box::from_raw(kg));
    }
}

/// # Safety
/// `kg` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_kg_stats(
    kg: *const TreeqaKg,
    entities: *mut usize,
    triples: *mut usize,
    attributes: *mut usize,
) -> TreeqaStatus {
    guard(|| {
        let s = handle(kg, "kg")?.store.stats();
        put(entities, s.entities, "entities")?;
        put(triples, s.triples, "triples")?;
        put(attributes, s.attributes, "attributes")
    })
}

/// Entity ids matching `name`, optionally narrowed by `descriptor`
/// (may be NULL), as a JSON array.
///
/// # Safety
/// `kg` must be a live handle; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_kg_search(
    kg: *const TreeqaKg,
    name: *const c_char,
    descriptor: *const c_char,
    out: *mut *mut c_char,
) -> TreeqaStatus {
    guard(|| {
        let kg = handle(kg, "kg")?;
        let name = text(name, "name")?;
        let descriptor = if descriptor.is_null() { None } else { Some(text(descriptor, "descriptor")?) };
        let ids = kg.store.search(name, descriptor);
        put_string(out, serde_json::to_string(&ids).expect("strings serialize"))
    })
}

/// Builds an engine from TOML configuration text. API keys are read from
/// the process environment.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_engine_new(config_toml: *const c_char, out: *mut *mut TreeqaEngine) -> TreeqaStatus {
    guard(|| {
        let env = |k: &str| std::env::var(k).ok();
        let config_err = |e: treeqa_core::config::ConfigError| Fail(TreeqaStatus::Config, e.to_string());
        let mut config = RunConfig::from_toml(text(config_toml, "config_toml")?).map_err(config_err)?;
        config.apply_env(env).map_err(config_err)?;
        let engine = config.build_engine(&env).map_err(config_err)?;
        put(out, Box::into_raw(Box::new(TreeqaEngine { engine })), "out")
    })
}

/// # Safety
/// `engine` must come from `treeqa_engine_new` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn treeqa_engine_free(engine: *mut TreeqaEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

unsafe fn record_out(record: treeqa_core::engine::RunRecord, out: *mut *mut c_char) -> Result<(), Fail> {
    let failed = record.error.clone();
    put_string(out, serde_json::to_string(&record).expect("records serialize"))?;
    match failed {
        Some(e) => Err(Fail(TreeqaStatus::Engine, e)),
        None => Ok(()),
    }
}

/// Plans and answers `question`. `*record_json` receives the full run
/// record even when the status is `TREEQA_STATUS_ENGINE`.
///
/// # Safety
/// `engine` must be a live handle; `question` NUL-terminated;
/// `record_json` writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_engine_ask(
    engine: *const TreeqaEngine,
    question: *const c_char,
    record_json: *mut *mut c_char,
) -> TreeqaStatus {
    guard(|| {
        let engine = handle(engine, "engine")?;
        let question = text(question, "question")?;
        record_out(engine.engine.answer(question), record_json)
    })
}

/// Executes a parsed plan.
///
/// # Safety
/// `engine` and `art` must be live handles; `record_json` writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_engine_exec_plan(
    engine: *const TreeqaEngine,
    art: *const TreeqaArt,
    record_json: *mut *mut c_char,
) -> TreeqaStatus {
    guard(|| {
        let engine = handle(engine, "engine")?;
        let art = handle(art, "art")?;
        record_out(engine.engine.answer_with_plan(&art.art), record_json)
    })
}

/// Token F1 of `prediction` against a JSON array of gold answers.
///
/// # Safety
/// Strings must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn treeqa_token_f1(
    prediction: *const c_char,
    golds_json: *const c_char,
    out: *mut f64,
) -> TreeqaStatus {
    guard(|| {
        let prediction = text(prediction, "prediction")?;
        let golds: Vec<String> = serde_json::from_str(text(golds_json, "golds_json")?)
            .map_err(|e| Fail(TreeqaStatus::Parse, e.to_string()))?;
        put(out, treeqa_core::eval::token_f1(prediction, &golds), "out")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    unsafe fn take(s: *mut c_char) -> String {
        let owned = CStr::from_ptr(s).to_str().unwrap().to_owned();
        treeqa_string_free(s);
        owned
    }

    fn last_error() -> String {
        let p = treeqa_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    const PLAN: &str = r#"{"question": "q", "nodes": [{"idx": 0, "q": "q", "children": [1, 2]}, {"idx": 1, "q": "a", "op": "Search(\"x\")"}, {"idx": 2, "q": "b", "op": "Search(\"y\")"}]}"#;

    #[test]
    fn art_round_trip_and_order() {
        unsafe {
            let mut art = ptr::null_mut();
            assert_eq!(treeqa_art_parse(c(PLAN).as_ptr(), &mut art), TreeqaStatus::Ok);
            assert!(treeqa_last_error().is_null());
            assert_eq!(treeqa_art_len(art), 3);

            let mut len = 0;
            assert_eq!(treeqa_art_post_order(art, ptr::null_mut(), 0, &mut len), TreeqaStatus::BufferTooSmall);
            assert_eq!(len, 3);
            let mut buf = [0usize; 3];
            assert_eq!(treeqa_art_post_order(art, buf.as_mut_ptr(), 3, &mut len), TreeqaStatus::Ok);
            assert_eq!(buf, [1, 2, 0]);

            let mut violations = ptr::null_mut();
            assert_eq!(treeqa_art_validate(art, &mut violations), TreeqaStatus::Ok);
            assert_eq!(take(violations), "[]");

            let mut doc = ptr::null_mut();
            assert_eq!(treeqa_art_serialize(art, &mut doc), TreeqaStatus::Ok);
            let doc = take(doc);
            let mut again = ptr::null_mut();
            assert_eq!(treeqa_art_parse(c(&doc).as_ptr(), &mut again), TreeqaStatus::Ok);
            assert_eq!((*again).art, (*art).art);
            treeqa_art_free(again);
            treeqa_art_free(art);
        }
    }

    #[test]
    fn errors_carry_messages() {
        unsafe {
            let mut art = ptr::null_mut();
            assert_eq!(treeqa_art_parse(c("{").as_ptr(), &mut art), TreeqaStatus::Parse);
            assert!(art.is_null());
            assert!(last_error().contains("schema"));
            assert_eq!(treeqa_art_parse(ptr::null(), &mut art), TreeqaStatus::NullArgument);
            let bad = [0xffu8, 0];
            assert_eq!(treeqa_art_parse(bad.as_ptr().cast(), &mut art), TreeqaStatus::InvalidUtf8);

            // Node 1 refers to a node that finishes after it.
            let nested = r#"{"question": "q", "nodes": [{"idx": 0, "q": "q", "children": [1, 2]}, {"idx": 1, "q": "a about [2]", "op": "Search(\"x\")"}, {"idx": 2, "q": "b", "op": "Search(\"y\")"}]}"#;
            assert_eq!(treeqa_art_parse(c(nested).as_ptr(), &mut art), TreeqaStatus::InvalidPlan);
            assert!(last_error().contains("node 1"));
        }
    }

    #[test]
    fn kg_handles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kg.jsonl");
        std::fs::write(
            &path,
            "{\"id\": \"Q1\", \"label\": \"Ada Lovelace\", \"concepts\": [\"human\"]}\n{\"id\": \"Q2\", \"label\": \"Analytical Engine\"}\n{\"h\": \"Q1\", \"r\": \"worked on\", \"t\": \"Q2\"}\n",
        )
        .unwrap();
        unsafe {
            let mut kg = ptr::null_mut();
            assert_eq!(treeqa_kg_load(c(path.to_str().unwrap()).as_ptr(), &mut kg), TreeqaStatus::Ok);
            let (mut e, mut t, mut a) = (0, 0, 0);
            assert_eq!(treeqa_kg_stats(kg, &mut e, &mut t, &mut a), TreeqaStatus::Ok);
            assert_eq!((e, t, a), (2, 1, 0));
            let mut ids = ptr::null_mut();
            assert_eq!(treeqa_kg_search(kg, c("Ada Lovelace").as_ptr(), ptr::null(), &mut ids), TreeqaStatus::Ok);
            assert_eq!(take(ids), r#"["Q1"]"#);
            treeqa_kg_free(kg);

            let missing = dir.path().join("missing.jsonl");
            assert_eq!(treeqa_kg_load(c(missing.to_str().unwrap()).as_ptr(), &mut kg), TreeqaStatus::Io);
        }
    }

    #[test]
    fn engine_answers_through_the_abi() {
        let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/shakira");
        let config = format!(
            "[backend]\nkind = \"scripted\"\nscript = {:?}\n[sources]\nenabled = [\"text\"]\ncorpus = {:?}\n",
            data.join("script.json"),
            data.join("corpus")
        );
        unsafe {
            let mut engine = ptr::null_mut();
            assert_eq!(treeqa_engine_new(c(&config).as_ptr(), &mut engine), TreeqaStatus::Ok, "{}", last_error());
            let mut record = ptr::null_mut();
            let q = c("How many studio albums has Shakira released between 2000 and 2010?");
            assert_eq!(treeqa_engine_ask(engine, q.as_ptr(), &mut record), TreeqaStatus::Ok);
            let record: serde_json::Value = serde_json::from_str(&take(record)).unwrap();
            assert_eq!(record["final_answer"], "5");

            let plan = std::fs::read_to_string(data.join("plan.json")).unwrap();
            let mut art = ptr::null_mut();
            treeqa_art_parse(c(&plan).as_ptr(), &mut art);
            let mut record = ptr::null_mut();
            assert_eq!(treeqa_engine_exec_plan(engine, art, &mut record), TreeqaStatus::Ok);
            let record: serde_json::Value = serde_json::from_str(&take(record)).unwrap();
            assert_eq!(record["final_answer"], "5");
            treeqa_art_free(art);
            treeqa_engine_free(engine);

            let mut engine = ptr::null_mut();
            assert_eq!(treeqa_engine_new(c("k = 3").as_ptr(), &mut engine), TreeqaStatus::Config);
            assert!(last_error().contains("no knowledge source"));
        }
    }

    #[test]
    fn f1_through_the_abi() {
        let mut f1 = 0.0;
        unsafe {
            assert_eq!(
                treeqa_token_f1(c("Paris").as_ptr(), c(r#"["London", "Paris, France"]"#).as_ptr(), &mut f1),
                TreeqaStatus::Ok
            );
        }
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn header_lists_every_entry_point() {
        let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/treeqa.h")).unwrap();
        for name in [
            "treeqa_last_error",
            "treeqa_string_free",
            "treeqa_art_parse",
            "treeqa_art_post_order",
            "treeqa_kg_search",
            "treeqa_engine_ask",
            "treeqa_token_f1",
            "TREEQA_STATUS_BUFFER_TOO_SMALL",
            "typedef struct TreeqaEngine TreeqaEngine",
        ] {
            assert!(header.contains(name), "{name} missing from header");
        }
    }
}
