#pragma once

// Dense kernels shared by the tape primitives: small row-major GEMM variants
// and im2col/col2im. Loops are ordered so every output cell is owned by one
// iteration; with OpenMP this keeps results independent of thread count.

#include <cstdint>
#include <vector>

namespace ta::ad::detail {

// C[M,N] = A[M,K] * B[K,N], accumulate if beta. Rows are processed in
// 4-row strips sharing each streamed B row, which keeps the kernel from
// going memory bound when M is small (conv output channels); every C row
// still accumulates in plain k order, so blocking does not change results.
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int M, int K, int N, bool accumulate = false) {
    const int strips = (M + 3) / 4;
#pragma omp parallel for schedule(static)
    for (int s = 0; s < strips; ++s) {
        const int i0 = 4 * s;
        const int ib = M - i0 < 4 ? M - i0 : 4;
        T* c0 = C + (std::int64_t)i0 * N;
        if (!accumulate)
            for (std::int64_t j = 0; j < (std::int64_t)ib * N; ++j) c0[j] = T(0);
        const T* a = A + (std::int64_t)i0 * K;
        if (ib == 4) {
            T* c1 = c0 + N;
            T* c2 = c1 + N;
            T* c3 = c2 + N;
            for (int k = 0; k < K; ++k) {
                const T a0 = a[k], a1 = a[K + k], a2 = a[2 * K + k], a3 = a[3 * K + k];
                if (a0 == T(0) && a1 == T(0) && a2 == T(0) && a3 == T(0)) continue;
                const T* b = B + (std::int64_t)k * N;
                for (int j = 0; j < N; ++j) {
                    const T bj = b[j];
                    c0[j] += a0 * bj;
                    c1[j] += a1 * bj;
                    c2[j] += a2 * bj;
                    c3[j] += a3 * bj;
                }
            }
        } else {
            for (int i = 0; i < ib; ++i) {
                T* c = c0 + (std::int64_t)i * N;
                const T* ai = a + (std::int64_t)i * K;
                for (int k = 0; k < K; ++k) {
                    const T av = ai[k];
                    if (av == T(0)) continue;
                    const T* b = B + (std::int64_t)k * N;
                    for (int j = 0; j < N; ++j) c[j] += av * b[j];
                }
            }
        }
    }
}

// C[M,N] = A^T[M,K] * B[K,N] with A stored [K,M].
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int M, int K, int N, bool accumulate = false) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < M; ++i) {
        T* c = C + (std::int64_t)i * N;
        if (!accumulate)
            for (int j = 0; j < N; ++j) c[j] = T(0);
        for (int k = 0; k < K; ++k) {
            const T av = A[(std::int64_t)k * M + i];
            if (av == T(0)) continue;
            const T* b = B + (std::int64_t)k * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] = A[M,K] * B^T[K,N] with B stored [N,K]. Same 4-row strips as
// gemm_nn so each streamed B row feeds four dot products. The simd
// reduction licenses the reassociation that -ffp-contract=off otherwise
// blocks; lane count is fixed per binary, so results stay run-to-run
// deterministic.
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int M, int K, int N, bool accumulate = false) {
    const int strips = (M + 3) / 4;
#pragma omp parallel for schedule(static)
    for (int s = 0; s < strips; ++s) {
        const int i0 = 4 * s;
        const int ib = M - i0 < 4 ? M - i0 : 4;
        const T* a0 = A + (std::int64_t)i0 * K;
        T* c0 = C + (std::int64_t)i0 * N;
        if (ib == 4) {
            const T* a1 = a0 + K;
            const T* a2 = a1 + K;
            const T* a3 = a2 + K;
            for (int j = 0; j < N; ++j) {
                const T* b = B + (std::int64_t)j * K;
                T s0 = T(0), s1 = T(0), s2 = T(0), s3 = T(0);
#pragma omp simd reduction(+ : s0, s1, s2, s3)
                for (int k = 0; k < K; ++k) {
                    const T bk = b[k];
                    s0 += a0[k] * bk;
                    s1 += a1[k] * bk;
                    s2 += a2[k] * bk;
                    s3 += a3[k] * bk;
                }
                if (accumulate) {
                    c0[j] += s0;
                    c0[N + j] += s1;
                    c0[2 * N + j] += s2;
                    c0[3 * N + j] += s3;
                } else {
                    c0[j] = s0;
                    c0[N + j] = s1;
                    c0[2 * N + j] = s2;
                    c0[3 * N + j] = s3;
                }
            }
        } else {
            for (int i = 0; i < ib; ++i) {
                const T* a = a0 + (std::int64_t)i * K;
                T* c = c0 + (std::int64_t)i * N;
                for (int j = 0; j < N; ++j) {
                    const T* b = B + (std::int64_t)j * K;
                    T acc = T(0);
#pragma omp simd reduction(+ : acc)
                    for (int k = 0; k < K; ++k) acc += a[k] * b[k];
                    c[j] = accumulate ? c[j] + acc : acc;
                }
            }
        }
    }
}

// cols[(C*kh*kw), DH*DW]: cols[(c*kh+ky)*kw+kx][y*DW+x] = src[c][y*s-p+ky][x*s-p+kx]
// (zero outside src). Shared by conv2d forward and conv2d_transpose backward.
template <typename T>
void im2col(const T* src, int C, int SH, int SW, int kh, int kw, int stride, int pad,
            int DH, int DW, T* cols) {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                T* row = cols + ((std::int64_t)(c * kh + ky) * kw + kx) * DH * DW;
                const T* s = src + (std::int64_t)c * SH * SW;
                for (int y = 0; y < DH; ++y) {
                    const int sy = y * stride - pad + ky;
                    T* r = row + (std::int64_t)y * DW;
                    if (sy < 0 || sy >= SH) {
                        for (int x = 0; x < DW; ++x) r[x] = T(0);
                        continue;
                    }
                    const T* srow = s + (std::int64_t)sy * SW;
                    for (int x = 0; x < DW; ++x) {
                        const int sx = x * stride - pad + kx;
                        r[x] = (sx >= 0 && sx < SW) ? srow[sx] : T(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add cols back into src layout.
template <typename T>
void col2im(const T* cols, int C, int SH, int SW, int kh, int kw, int stride, int pad,
            int DH, int DW, T* src, bool accumulate = false) {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        T* s = src + (std::int64_t)c * SH * SW;
        if (!accumulate)
            for (std::int64_t i = 0; i < (std::int64_t)SH * SW; ++i) s[i] = T(0);
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const T* row = cols + ((std::int64_t)(c * kh + ky) * kw + kx) * DH * DW;
                for (int y = 0; y < DH; ++y) {
                    const int sy = y * stride - pad + ky;
                    if (sy < 0 || sy >= SH) continue;
                    T* srow = s + (std::int64_t)sy * SW;
                    const T* r = row + (std::int64_t)y * DW;
                    for (int x = 0; x < DW; ++x) {
                        const int sx = x * stride - pad + kx;
                        if (sx >= 0 && sx < SW) srow[sx] += r[x];
                    }
                }
            }
        }
    }
}

}  // namespace ta::ad::detail
