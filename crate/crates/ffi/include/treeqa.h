#ifndef TREEQA_H
#define TREEQA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TreeqaStatus {
  TREEQA_STATUS_OK = 0,
  // A required pointer argument was NULL.
  TREEQA_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  TREEQA_STATUS_INVALID_UTF8 = 2,
  // Input text could not be parsed.
  TREEQA_STATUS_PARSE = 3,
  // A plan parsed but broke a structural rule.
  TREEQA_STATUS_INVALID_PLAN = 4,
  TREEQA_STATUS_CONFIG = 5,
  TREEQA_STATUS_IO = 6,
  // The engine could not produce an answer.
  TREEQA_STATUS_ENGINE = 7,
  // A caller-provided buffer was too small; the needed length was
  // still written.
  TREEQA_STATUS_BUFFER_TOO_SMALL = 8,
  // A Rust panic was caught at the boundary.
  TREEQA_STATUS_PANIC = 9,
} TreeqaStatus;

typedef struct TreeqaArt TreeqaArt;

typedef struct TreeqaEngine TreeqaEngine;

typedef struct TreeqaKg TreeqaKg;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer
// stays valid until the next call into the library on this thread.
const char *treeqa_last_error(void);

// Releases a string returned by the library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void treeqa_string_free(char *s);

// Parses a plan document (JSON). Malformed JSON gives
// `TREEQA_STATUS_PARSE`; a well-formed document describing a broken tree
// gives `TREEQA_STATUS_INVALID_PLAN`.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum TreeqaStatus treeqa_art_parse(const char *json, struct TreeqaArt **out);

// # Safety
// `art` must come from `treeqa_art_parse` and not have been freed.
void treeqa_art_free(struct TreeqaArt *art);

// Number of nodes, or 0 for NULL.
//
// # Safety
// `art` must be NULL or a live handle.
size_t treeqa_art_len(const struct TreeqaArt *art);

// Writes the canonical plan document to `*out`.
//
// # Safety
// `art` must be a live handle; `out` must be writable.
enum TreeqaStatus treeqa_art_serialize(const struct TreeqaArt *art, char **out);

// Checks the tree. Handles from `treeqa_art_parse` are always valid, so
// this mainly reports the rule list for display. Returns `TREEQA_STATUS_INVALID_PLAN` when any rule is
// broken; `*violations` (if not NULL) receives a JSON array of messages
// either way.
//
// # Safety
// `art` must be a live handle; `violations` must be NULL or writable.
enum TreeqaStatus treeqa_art_validate(const struct TreeqaArt *art,
                                      char **violations);

// Fills `buf` with the execution order (children before parents).
// `*len` always receives the node count.
//
// # Safety
// `buf` must hold `cap` elements (may be NULL when `cap` is 0); `len`
// must be writable.
enum TreeqaStatus treeqa_art_post_order(const struct TreeqaArt *art,
                                        size_t *buf,
                                        size_t cap,
                                        size_t *len);

// Loads a KG dump (JSONL).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TreeqaStatus treeqa_kg_load(const char *path, struct TreeqaKg **out);

// # Safety
// `kg` must come from `treeqa_kg_load` and not have been freed.
void treeqa_kg_free(struct TreeqaKg *kg);

// # Safety
// `kg` must be a live handle; the out pointers must be writable.
enum TreeqaStatus treeqa_kg_stats(const struct TreeqaKg *kg,
                                  size_t *entities,
                                  size_t *triples,
                                  size_t *attributes);

// Entity ids matching `name`, optionally narrowed by `descriptor`
// (may be NULL), as a JSON array.
//
// # Safety
// `kg` must be a live handle; strings NUL-terminated; `out` writable.
enum TreeqaStatus treeqa_kg_search(const struct TreeqaKg *kg,
                                   const char *name,
                                   const char *descriptor,
                                   char **out);

// Builds an engine from TOML configuration text. API keys are read from
// the process environment.
//
// # Safety
// `config_toml` must be a NUL-terminated string; `out` writable.
enum TreeqaStatus treeqa_engine_new(const char *config_toml, struct TreeqaEngine **out);

// # Safety
// `engine` must come from `treeqa_engine_new` and not have been freed.
void treeqa_engine_free(struct TreeqaEngine *engine);

// Plans and answers `question`. `*record_json` receives the full run
// record even when the status is `TREEQA_STATUS_ENGINE`.
//
// # Safety
// `engine` must be a live handle; `question` NUL-terminated;
// `record_json` writable.
enum TreeqaStatus treeqa_engine_ask(const struct TreeqaEngine *engine,
                                    const char *question,
                                    char **record_json);

// Executes a parsed plan.
//
// # Safety
// `engine` and `art` must be live handles; `record_json` writable.
enum TreeqaStatus treeqa_engine_exec_plan(const struct TreeqaEngine *engine,
                                          const struct TreeqaArt *art,
                                          char **record_json);

// Token F1 of `prediction` against a JSON array of gold answers.
//
// # Safety
// Strings must be NUL-terminated; `out` writable.
enum TreeqaStatus treeqa_token_f1(const char *prediction, const char *golds_json, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TREEQA_H */
