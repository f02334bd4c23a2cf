#ifndef NTK_LIMITS_H
#define NTK_LIMITS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NtkStatus {
  NTK_STATUS_OK = 0,
  NTK_STATUS_NULL_POINTER = 1,
  NTK_STATUS_INVALID_UTF8 = 2,
  NTK_STATUS_DOMAIN = 3,
  NTK_STATUS_NUMERICAL = 4,
  NTK_STATUS_PRECONDITION = 5,
  NTK_STATUS_DEGENERATE = 6,
  NTK_STATUS_GRAPH = 7,
  NTK_STATUS_CONFIG = 8,
  NTK_STATUS_DIMENSION = 9,
  NTK_STATUS_IO = 10,
  NTK_STATUS_JSON = 11,
  NTK_STATUS_BUFFER_TOO_SMALL = 12,
  NTK_STATUS_PANIC = 13,
} NtkStatus;

typedef enum NtkRegime {
  NTK_REGIME_ORDER = 0,
  NTK_REGIME_EDGE = 1,
  NTK_REGIME_CHAOS = 2,
} NtkRegime;

// Opaque position-graph handle.
typedef struct NtkGraph NtkGraph;

// Opaque nonlinearity handle.
typedef struct NtkNonlinearity NtkNonlinearity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library from the same thread.
const char *ntk_last_error(void);

// Library version as a static string.
const char *ntk_version(void);

// Standardized ReLU, `√2·max(x, 0)`. Never fails.
struct NtkNonlinearity *ntk_nonlinearity_standardized_relu(void);

// Build a nonlinearity from its JSON description, e.g.
// `{"kind": "relu", "normalization": "normalized"}`.
//
// # Safety
// `json` must be a nul-terminated string and `out` a writable pointer.
enum NtkStatus ntk_nonlinearity_from_json(const char *json, struct NtkNonlinearity **out);

// # Safety
// `sigma` must come from this library and not be used afterwards. Null is ignored.
void ntk_nonlinearity_free(struct NtkNonlinearity *sigma);

// `R_σ(ρ)`.
//
// # Safety
// `sigma` must be a live handle and `out` writable.
enum NtkStatus ntk_dual(const struct NtkNonlinearity *sigma, double rho, double *out);

// `R_σ̇(ρ)`.
//
// # Safety
// `sigma` must be a live handle and `out` writable.
enum NtkStatus ntk_dual_derivative(const struct NtkNonlinearity *sigma, double rho, double *out);

// `r = (1-β²)·E[σ̇(Z)²]`.
//
// # Safety
// `sigma` must be a live handle and `out` writable.
enum NtkStatus ntk_characteristic_value(const struct NtkNonlinearity *sigma,
                                        double beta,
                                        double *out);

// Regime, characteristic value and fixed point (NaN when there is none).
//
// # Safety
// `sigma` must be a live handle and every output pointer writable.
enum NtkStatus ntk_classify(const struct NtkNonlinearity *sigma,
                            double beta,
                            enum NtkRegime *regime,
                            double *r,
                            double *fixed_point);

// Activation kernel `Σ^(layer)(ρ)` of a depth-`depth` fully-connected network.
//
// # Safety
// `sigma` must be a live handle and `out` writable.
enum NtkStatus ntk_fc_activation_kernel(const struct NtkNonlinearity *sigma,
                                        double beta,
                                        size_t depth,
                                        size_t layer,
                                        double rho,
                                        double *out);

// Limiting NTK `Θ^(L)(ρ)`.
//
// # Safety
// `sigma` must be a live handle and `out` writable.
enum NtkStatus ntk_fc_ntk(const struct NtkNonlinearity *sigma,
                          double beta,
                          size_t depth,
                          double rho,
                          double *out);

// `ϑ^(L)(ρ) = Θ(ρ)/Θ(1)`.
//
// # Safety
// `sigma` must be a live handle and `out` writable.
enum NtkStatus ntk_fc_normalized_ntk(const struct NtkNonlinearity *sigma,
                                     double beta,
                                     size_t depth,
                                     double rho,
                                     double *out);

// Checkerboard NTK `Θ(v)` for `v = 0..L-1` followed by the diagonal, so
// `len` must be at least `depth + 1`. `written` receives `depth + 1`, also
// when the buffer is too small.
//
// # Safety
// `sigma` must be a live handle, `out` must hold `len` doubles and `written`
// must be writable.
enum NtkStatus ntk_checkerboard_ntk(const struct NtkNonlinearity *sigma,
                                    double beta,
                                    size_t depth,
                                    double *out,
                                    size_t len,
                                    size_t *written);

// Parse a position graph from its JSON document.
//
// # Safety
// `json` must be a nul-terminated string and `out` writable.
enum NtkStatus ntk_graph_from_json(const char *json, struct NtkGraph **out);

// # Safety
// `graph` must come from this library and not be used afterwards. Null is ignored.
void ntk_graph_free(struct NtkGraph *graph);

// Number of layers above the input.
//
// # Safety
// `graph` must be a live handle and `out` writable.
enum NtkStatus ntk_graph_depth(const struct NtkGraph *graph, size_t *out);

// Structural checks. `violations` receives their count; when nonzero the
// first message is available from `ntk_last_error` and the status is `Graph`.
//
// # Safety
// `graph` must be a live handle and `violations` writable.
enum NtkStatus ntk_graph_validate(const struct NtkGraph *graph, size_t *violations);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NTK_LIMITS_H */
