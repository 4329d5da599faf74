#ifndef GRAPHORMER_KIT_H
#define GRAPHORMER_KIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  GK_STATUS_OK = 0,
  GK_STATUS_NULL_POINTER = 1,
  GK_STATUS_INVALID_ARGUMENT = 2,
  GK_STATUS_INVALID_GRAPH = 3,
  GK_STATUS_IO = 4,
  GK_STATUS_PARSE = 5,
  GK_STATUS_CHECKPOINT = 6,
  GK_STATUS_NUMERIC = 7,
  GK_STATUS_PANIC = 8,
} GkStatus;

/**
 * A graph with integer node and edge features.
 */
typedef struct GkGraph GkGraph;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct GkModel GkModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *gk_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gk_version(void);

/**
 * Build a graph. `edges` holds `num_edges` (source, target) pairs.
 * `node_feats` is row-major `[num_nodes, node_slots]` and `edge_feats`
 * `[num_edges, edge_slots]`; either may be null when its slot count is 0.
 *
 * # Safety
 * Every non-null pointer must reference the number of values stated above,
 * and `out` must be writable.
 */
GkStatus gk_graph_new(size_t num_nodes,
                      bool directed,
                      const size_t *edges,
                      size_t num_edges,
                      const size_t *node_feats,
                      size_t node_slots,
                      const size_t *edge_feats,
                      size_t edge_slots,
                      GkGraph **out);

/**
 * # Safety
 * `graph` is null or was returned by [`gk_graph_new`] and not yet freed.
 */
void gk_graph_free(GkGraph *graph);

/**
 * Number of nodes, or 0 for a null handle.
 *
 * # Safety
 * `graph` is null or a live handle.
 */
size_t gk_graph_num_nodes(const GkGraph *graph);

/**
 * Write the `n * n` shortest-path distances (row-major, -1 when
 * unreachable) into `out`, which holds `len` values.
 *
 * # Safety
 * `graph` is a live handle and `out` has room for `len` values.
 */
GkStatus gk_graph_spd(const GkGraph *graph, int32_t *out, size_t len);

/**
 * Whether 1-WL refinement fails to tell the graphs apart.
 *
 * # Safety
 * `a` and `b` are live handles and `out` is writable.
 */
GkStatus gk_wl_equivalent(const GkGraph *a, const GkGraph *b, bool *out);

/**
 * Load the model stored in a checkpoint file.
 *
 * # Safety
 * `path` is a NUL-terminated UTF-8 string and `out` is writable.
 */
GkStatus gk_model_load(const char *path, GkModel **out);

/**
 * # Safety
 * `model` is null or was returned by [`gk_model_load`] and not yet freed.
 */
void gk_model_free(GkModel *model);

/**
 * Predict one value per graph (a logit for binary models).
 *
 * # Safety
 * `graphs` points to `count` live graph handles and `out` has room for
 * `count` values.
 */
GkStatus gk_model_predict(const GkModel *model,
                          const GkGraph *const *graphs,
                          size_t count,
                          double *out);

/**
 * Run the construction checks; writes the number passed and the total.
 *
 * # Safety
 * `passed` and `total` are writable.
 */
GkStatus gk_express_check(uint64_t seed, uint32_t *passed, uint32_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRAPHORMER_KIT_H */
