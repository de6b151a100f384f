#ifndef NMSLAB_H
#define NMSLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum NmslabStatus {
  NMSLAB_STATUS_OK = 0,
  NMSLAB_STATUS_NULL_POINTER = 1,
  NMSLAB_STATUS_INVALID_ARGUMENT = 2,
  // The request has no solution (budget below backbone time, ...).
  NMSLAB_STATUS_INFEASIBLE = 3,
  NMSLAB_STATUS_IO = 4,
  NMSLAB_STATUS_FORMAT = 5,
  // Output buffer too small; the required length was still written.
  NMSLAB_STATUS_BUFFER_TOO_SMALL = 6,
  NMSLAB_STATUS_INTERNAL = 7,
} NmslabStatus;

// Opaque trained detector.
typedef struct NmslabDetector NmslabDetector;

// Opaque latency model.
typedef struct NmslabLatencyModel NmslabLatencyModel;

// Axis-aligned box with score, in pixel coordinates.
typedef struct NmslabBox {
  double cx;
  double cy;
  double w;
  double h;
  double score;
  uint32_t class_id;
} NmslabBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *nmslab_last_error(void);

// Greedy NMS over `n` boxes. Boxes scoring below `conf_threshold` are
// dropped first. Writes indices of kept boxes, highest score first, into
// `keep` (capacity `keep_cap`) and their number into `keep_len`.
//
// # Safety
// `boxes` must point to `n` boxes and `keep` to `keep_cap` writable slots.
enum NmslabStatus nmslab_nms(const struct NmslabBox *boxes,
                             size_t n,
                             double conf_threshold,
                             double iou_threshold,
                             bool per_class,
                             size_t *keep,
                             size_t keep_cap,
                             size_t *keep_len);

// Builds a latency model from its coefficients. `count_scale` maps a
// candidate count onto the workload it stands for (1 = as measured).
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum NmslabStatus nmslab_latency_model_new(double alpha,
                                           double beta,
                                           double s_iou,
                                           double b,
                                           uint64_t t_backbone_ns,
                                           double count_scale,
                                           struct NmslabLatencyModel **out);

// Loads a model written by `nmslab fit-latency`.
//
// # Safety
// `path` must be a nul-terminated string; `out` a valid pointer.
enum NmslabStatus nmslab_latency_model_load(const char *path, struct NmslabLatencyModel **out);

// Predicted NMS time in seconds for `count` candidates.
//
// # Safety
// `model` must come from a `nmslab_latency_model_*` constructor.
enum NmslabStatus nmslab_latency_model_predict(const struct NmslabLatencyModel *model,
                                               uint64_t count,
                                               double *seconds);

// Largest candidate count whose predicted NMS time fits the frame budget
// of `fps` after the backbone. `Infeasible` when the backbone alone
// exceeds the budget.
//
// # Safety
// `model` must come from a `nmslab_latency_model_*` constructor.
enum NmslabStatus nmslab_latency_model_capacity(const struct NmslabLatencyModel *model,
                                                double fps,
                                                uint64_t *c_max);

// # Safety
// `model` must be null or come from a constructor and not be freed twice.
void nmslab_latency_model_free(struct NmslabLatencyModel *model);

// Loads a checkpoint written by `nmslab train` or `nmslab defend`.
//
// # Safety
// `path` must be a nul-terminated string; `out` a valid pointer.
enum NmslabStatus nmslab_detector_load(const char *path, struct NmslabDetector **out);

// Side length of the square input and number of classes.
//
// # Safety
// `det` must come from `nmslab_detector_load`.
enum NmslabStatus nmslab_detector_shape(const struct NmslabDetector *det,
                                        size_t *image_size,
                                        size_t *num_classes);

// Detects objects in an HWC RGB image with values in [0, 1]. Writes up to
// `cap` detections, highest score first, the number of detections to
// `len`, and the number of candidates that passed the confidence filter to
// `candidates`.
//
// # Safety
// `pixels` must point to `height * width * 3` values and `out` to `cap`
// writable boxes.
enum NmslabStatus nmslab_detector_detect(const struct NmslabDetector *det,
                                         const double *pixels,
                                         size_t height,
                                         size_t width,
                                         double conf_threshold,
                                         double iou_threshold,
                                         struct NmslabBox *out,
                                         size_t cap,
                                         size_t *len,
                                         size_t *candidates);

// # Safety
// `det` must be null or come from `nmslab_detector_load` and not be freed
// twice.
void nmslab_detector_free(struct NmslabDetector *det);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NMSLAB_H */
