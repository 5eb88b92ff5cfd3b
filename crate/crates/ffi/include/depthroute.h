#ifndef DEPTHROUTE_H
#define DEPTHROUTE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define DR_OK 0

#define DR_ERR_NULL 1

#define DR_ERR_INPUT 2

#define DR_ERR_DIMENSION 3

#define DR_ERR_CONSTRAINT 4

#define DR_ERR_FORMAT 5

#define DR_ERR_IO 6

#define DR_ERR_NUMERIC 7

#define DR_ERR_PANIC 8

/**
 * Frozen backbone.
 */
typedef struct DrBackbone DrBackbone;

/**
 * Trained routers, one per backbone layer.
 */
typedef struct DrRouterStack DrRouterStack;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *dr_last_error(void);

/**
 * Counter backbone with `layers` layers and hidden width `dim`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
int32_t dr_counter_backbone_new(size_t layers, size_t dim, uint64_t seed, struct DrBackbone **out);

/**
 * Loads a backbone checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
int32_t dr_backbone_load(const char *path, struct DrBackbone **out);

/**
 * # Safety
 * `b` must come from this library and not be used afterwards. Null is ignored.
 */
void dr_backbone_free(struct DrBackbone *b);

/**
 * # Safety
 * `b` must be a live handle and `out` writable.
 */
int32_t dr_backbone_num_layers(const struct DrBackbone *b, size_t *out);

/**
 * `DR_OK` when the layer sequence is a valid path for a `depth`-layer model,
 * `DR_ERR_CONSTRAINT` naming the broken rule otherwise.
 *
 * # Safety
 * `layers` must point to `len` values.
 */
int32_t dr_validate_path(const size_t *layers, size_t len, size_t depth);

/**
 * Per-layer application counts of a valid path into `labels_out[0..depth]`.
 *
 * # Safety
 * `layers` must point to `len` values and `labels_out` to `depth` bytes.
 */
int32_t dr_path_to_labels(const size_t *layers, size_t len, size_t depth, uint8_t *labels_out);

/**
 * Runs the backbone along `path` and writes the answer text.
 *
 * # Safety
 * Pointers must cover the given lengths; `answer` must hold `cap` bytes.
 * `needed` may be null.
 */
int32_t dr_forward_with_path(const struct DrBackbone *b,
                             const uint32_t *tokens,
                             size_t n_tokens,
                             const size_t *layers,
                             size_t len,
                             char *answer,
                             size_t cap,
                             size_t *needed);

/**
 * Loads a routed checkpoint into a backbone handle and a router handle.
 *
 * # Safety
 * `path` must be NUL-terminated; both outputs writable.
 */
int32_t dr_router_stack_load(const char *path,
                             struct DrBackbone **out_backbone,
                             struct DrRouterStack **out_stack);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards. Null is ignored.
 */
void dr_router_stack_free(struct DrRouterStack *s);

/**
 * Greedy routed inference. Pass NaN as `control` for the plain router.
 * `decisions_out` receives one action per layer (0 skip, 1 execute, 2 repeat).
 *
 * # Safety
 * `decisions_out` must hold as many bytes as the backbone has layers;
 * `executed` and `needed` may be null.
 */
int32_t dr_routed_forward(const struct DrBackbone *b,
                          const struct DrRouterStack *s,
                          const uint32_t *tokens,
                          size_t n_tokens,
                          double control,
                          uint8_t *decisions_out,
                          size_t *executed,
                          char *answer,
                          size_t cap,
                          size_t *needed);

/**
 * Class weights `alpha[0..3]` for skip, execute and repeat.
 *
 * # Safety
 * `alpha_out` must hold three doubles.
 */
int32_t dr_effective_number_weights(uint64_t n_skip,
                                    uint64_t n_execute,
                                    uint64_t n_repeat,
                                    double beta,
                                    double *alpha_out);

/**
 * Mean focal loss over `n` rows of probabilities (row-major, three per row).
 *
 * # Safety
 * `probs` must hold `3 * n` doubles, `labels` `n` bytes, `alpha` three doubles.
 */
int32_t dr_focal_loss(const double *probs,
                      const uint8_t *labels,
                      size_t n,
                      const double *alpha,
                      double gamma,
                      double *out);

/**
 * Blends a probability triple by the control value `p` in [-1, 1].
 *
 * # Safety
 * `probs` and `out` must each hold three doubles; they may alias.
 */
int32_t dr_control_interpolate(const double *probs, double p, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHROUTE_H */
