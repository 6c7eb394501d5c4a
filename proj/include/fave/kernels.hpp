#pragma once

#include <cmath>
#include <cstring>

#include "fave/common.hpp"

namespace fave::kernels {

// C[m,n] = (or +=) opA(A) * opB(B), one batch slice. Layouts:
//   ta=false: A is [m,k]; ta=true: A stored [k,m]
//   tb=false: B is [k,n]; tb=true: B stored [n,k]
// Loop orders chosen so the inner loop is contiguous in both operands.
inline void gemm(real* __restrict__ c, const real* __restrict__ a, const real* __restrict__ b,
                 i64 m, i64 k, i64 n, bool ta, bool tb, bool accumulate) {
    if (!accumulate) std::memset(c, 0, static_cast<size_t>(m * n) * sizeof(real));
    if (!ta && !tb) {
        for (i64 i = 0; i < m; ++i) {
            const real* arow = a + i * k;
            real* crow = c + i * n;
            for (i64 p = 0; p < k; ++p) {
                real av = arow[p];
                if (av == real(0)) continue;
                const real* brow = b + p * n;
                for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!ta && tb) {
        // four output columns at a time: independent reductions over k
        for (i64 i = 0; i < m; ++i) {
            const real* arow = a + i * k;
            real* crow = c + i * n;
            i64 j = 0;
            for (; j + 4 <= n; j += 4) {
                const real* b0 = b + j * k;
                const real* b1 = b0 + k;
                const real* b2 = b1 + k;
                const real* b3 = b2 + k;
                real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
                for (i64 p = 0; p < k; ++p) {
                    real av = arow[p];
                    s0 += av * b0[p];
                    s1 += av * b1[p];
                    s2 += av * b2[p];
                    s3 += av * b3[p];
                }
                crow[j] += s0;
                crow[j + 1] += s1;
                crow[j + 2] += s2;
                crow[j + 3] += s3;
            }
            const real* brow = b + j * k;
            for (; j < n; ++j, brow += k) {
                real acc = 0;
                for (i64 p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else if (ta && !tb) {
        for (i64 p = 0; p < k; ++p) {
            const real* arow = a + p * m;
            const real* brow = b + p * n;
            for (i64 i = 0; i < m; ++i) {
                real av = arow[i];
                if (av == real(0)) continue;
                real* crow = c + i * n;
                for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (i64 i = 0; i < m; ++i) {
            real* crow = c + i * n;
            for (i64 j = 0; j < n; ++j) {
                real acc = 0;
                for (i64 p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
                crow[j] += acc;
            }
        }
    }
}

inline real gelu(real x) {
    // tanh approximation; the derivative used by the tape matches it.
    const real c = real(0.7978845608028653558798921198687637);  // sqrt(2/pi)
    real u = c * (x + real(0.044715) * x * x * x);
    return real(0.5) * x * (real(1) + std::tanh(u));
}

inline void softmax_row(real* __restrict__ x, i64 n) {
    real mx = x[0];
    for (i64 j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    real sum = 0;
    for (i64 j = 0; j < n; ++j) {
        x[j] = std::exp(x[j] - mx);
        sum += x[j];
    }
    real inv = real(1) / sum;
    for (i64 j = 0; j < n; ++j) x[j] *= inv;
}

inline real logsumexp_row(const real* __restrict__ x, i64 n) {
    real mx = x[0];
    for (i64 j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    real sum = 0;
    for (i64 j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
    return mx + std::log(sum);
}

}  // namespace fave::kernels
