#ifndef CHUNKLENS_H
#define CHUNKLENS_H

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum ClStatus {
  CL_STATUS_OK = 0,
  CL_STATUS_NULL_POINTER = 1,
  CL_STATUS_INVALID_ARGUMENT = 2,
  CL_STATUS_IO = 3,
  CL_STATUS_FORMAT = 4,
  CL_STATUS_VALIDATION = 5,
  CL_STATUS_NUMERICAL = 6,
  CL_STATUS_PANIC = 7,
} ClStatus;

// A fitted population-average chunk.
typedef struct ClChunk ClChunk;

// A chunk dictionary.
typedef struct ClDictionary ClDictionary;

// A trained recurrent model.
typedef struct ClModel ClModel;

// An activation trace.
typedef struct ClTrace ClTrace;

// Detection counts from `cl_chunk_evaluate`.
typedef struct ClConfusion {
  size_t tp;
  size_t fp;
  size_t tn;
  size_t fn_;
} ClConfusion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *cl_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cl_version(void);

// Reads an ACTR trace file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ClStatus cl_trace_load(const char *path, struct ClTrace **out);

// Builds a trace from `layers * n_tokens * dim` values in layer, token,
// neuron order. `tokens` holds `n_tokens` strings.
//
// # Safety
// Every pointer must be valid for the stated lengths.
enum ClStatus cl_trace_new(const char *model_id,
                           size_t layers,
                           size_t dim,
                           const char *const *tokens,
                           size_t n_tokens,
                           const float *values,
                           size_t n_values,
                           struct ClTrace **out);

// Writes a trace to an ACTR file.
//
// # Safety
// `trace` must be a live handle and `path` a NUL-terminated string.
enum ClStatus cl_trace_save(const struct ClTrace *trace, const char *path);

// Layer count, token count and width of a trace.
//
// # Safety
// `trace` must be a live handle; output pointers must be writable.
enum ClStatus cl_trace_shape(const struct ClTrace *trace,
                             size_t *layers,
                             size_t *tokens,
                             size_t *dim);

// Copies the hidden state at (`layer`, `token`) into `buf`, which holds
// `len` floats; `len` must equal the trace width.
//
// # Safety
// `trace` must be a live handle; `buf` must be writable for `len` floats.
enum ClStatus cl_trace_state(const struct ClTrace *trace,
                             size_t layer,
                             size_t token,
                             float *buf,
                             size_t len);

// Releases a trace. Null is ignored.
//
// # Safety
// `trace` must be null or a handle not yet freed.
void cl_trace_free(struct ClTrace *trace);

// Fits a population-average chunk for `concept` at `layer`, with occurrence
// indices shifted by `shift` tokens.
//
// # Safety
// `trace` must be a live handle, `concept` a NUL-terminated string and `out`
// writable.
enum ClStatus cl_chunk_fit(const struct ClTrace *trace,
                           const char *concept,
                           size_t layer,
                           int64_t shift,
                           struct ClChunk **out);

// Reads a chunk from JSON.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ClStatus cl_chunk_load(const char *path, struct ClChunk **out);

// Writes a chunk as JSON.
//
// # Safety
// `chunk` must be a live handle and `path` a NUL-terminated string.
enum ClStatus cl_chunk_save(const struct ClChunk *chunk, const char *path);

// Support size, tolerance and membership threshold of a chunk.
//
// # Safety
// `chunk` must be a live handle; output pointers must be writable.
enum ClStatus cl_chunk_info(const struct ClChunk *chunk,
                            size_t *support_size,
                            double *tol,
                            double *delta);

// Writes 1 to `hit` when `state` (of `len` floats) is a member of the chunk,
// else 0.
//
// # Safety
// `chunk` must be a live handle; `state` readable for `len` floats.
enum ClStatus cl_chunk_detect(const struct ClChunk *chunk,
                              const float *state,
                              size_t len,
                              int32_t *hit);

// Detection counts of a chunk against the concept occurrences of `trace`.
//
// # Safety
// `chunk` and `trace` must be live handles; `out` writable.
enum ClStatus cl_chunk_evaluate(const struct ClChunk *chunk,
                                const struct ClTrace *trace,
                                struct ClConfusion *out);

// Releases a chunk. Null is ignored.
//
// # Safety
// `chunk` must be null or a handle not yet freed.
void cl_chunk_free(struct ClChunk *chunk);

// Trains a `k`-row dictionary on one layer of a trace.
//
// # Safety
// `trace` must be a live handle; `out` writable.
enum ClStatus cl_dictionary_train(const struct ClTrace *trace,
                                  size_t layer,
                                  size_t k,
                                  size_t epochs,
                                  uint64_t seed,
                                  struct ClDictionary **out);

// Reads a dictionary file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum ClStatus cl_dictionary_load(const char *path, struct ClDictionary **out);

// Writes a dictionary file.
//
// # Safety
// `dict` must be a live handle and `path` a NUL-terminated string.
enum ClStatus cl_dictionary_save(const struct ClDictionary *dict, const char *path);

// Best-matching row for one embedding of `len` floats and its cosine
// similarity.
//
// # Safety
// `dict` must be a live handle; `x` readable for `len` floats; outputs
// writable.
enum ClStatus cl_dictionary_assign(const struct ClDictionary *dict,
                                   const float *x,
                                   size_t len,
                                   size_t *row,
                                   float *similarity);

// Releases a dictionary. Null is ignored.
//
// # Safety
// `dict` must be null or a handle not yet freed.
void cl_dictionary_free(struct ClDictionary *dict);

// Reads a model JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum ClStatus cl_model_load(const char *path, struct ClModel **out);

// Runs the model over `symbols` and records its hidden states.
//
// # Safety
// `model` must be a live handle, `symbols` a NUL-terminated string and `out`
// writable.
enum ClStatus cl_model_export_trace(const struct ClModel *model,
                                    const char *symbols,
                                    struct ClTrace **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void cl_model_free(struct ClModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHUNKLENS_H */
