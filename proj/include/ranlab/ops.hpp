#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ranlab/tape.hpp"

/// Differentiable array operations recorded on a Tape.
///
/// Shapes follow a small fixed vocabulary: rank-2 "matrices" are (rows, cols),
/// rank-1 "vectors" broadcast only where the op name says so (add_row,
/// sub_row). Every reduction is a sequential loop in index order.
namespace ranlab::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a * s for a scalar-valued Var s.
Var scale_by(Var a, Var s);

/// (n,k) x (k,m) -> (n,m)
Var matmul(Var a, Var b);
/// a * b^T: (n,k) x (m,k) -> (n,m)
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

/// Adds the length-m vector b to every row of the (n,m) matrix a.
Var add_row(Var a, Var b);
Var sub_row(Var a, Var b);

Var sum(Var a);
Var mean(Var a);
/// Column sums of an (n,m) matrix -> (m).
Var sum_rows(Var a);
Var mean_rows(Var a);
/// Per-row sums of an (n,m) matrix -> (n).
Var sum_cols(Var a);
/// Per-row dot products of two (n,m) matrices -> (n).
Var row_dot(Var a, Var b);

Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);
Var tanh(Var a);
/// softplus(x) - ln 2: smooth rectifier with f(0) = 0 and f'(0) = 1/2.
Var smooth_relu(Var a);
/// acos(clamp(x, -1, 1)) with the derivative taken at clamp(x, lo, hi), so it
/// stays finite at +-1.
Var acos_clamped(Var a, double lo, double hi);

/// Row-wise L2 normalization of an (n,d) matrix or a (d) vector.
/// Throws DegenerateEmbedding on a zero-norm row.
Var normalize_rows(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Mean over rows of -log softmax(logits)[i, labels[i]].
Var cross_entropy(Var logits, std::span<const int> labels);
/// Mean binary cross-entropy with logits against 0/1 targets of the same shape.
Var binary_cross_entropy(Var logits, const Array& targets);
/// out[i] = a[i, index[i]].
Var pick(Var a, std::span<const std::size_t> index);

/// out[i] = a[index[i]] (row gather); backward scatter-adds.
Var gather_rows(Var a, std::span<const std::size_t> index);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
/// Mean of consecutive row groups; lengths must sum to rows(a) and be > 0.
Var segment_mean(Var a, std::span<const std::size_t> lengths);
Var concat_cols(Var a, Var b);
/// Concatenation of two vectors.
Var concat(Var a, Var b);
/// Stacks equal-length vectors (or 1-row matrices) into an (n,d) matrix.
Var stack_rows(std::span<const Var> rows);
/// Euclidean distances between rows: (n,d) x (k,d) -> (n,k). The gradient at
/// a zero distance is taken as zero.
Var row_distances(Var f, Var c);

/// Non-overlapping p x p patches of images stored as rows of H*W*C pixels in
/// (h, w, c) order. Output rows are (image, patch-row, patch-col), each holding
/// p*p*C values in (dy, dx, c) order.
Var patchify(Var images, std::size_t height, std::size_t width, std::size_t channels,
             std::size_t patch);

}  // namespace ranlab::ops
