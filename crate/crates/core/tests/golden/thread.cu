// kernel thread_kernel: 1024 blocks x 128 threads, 0 shared bytes
//   launch 1024 128;
//   mul_0 [GRID,CTA];
#include <cuda_fp16.h>
#include <climits>

extern "C" __global__ void __launch_bounds__(128) thread_kernel(
    const float* __restrict__ in_x,
    const float* __restrict__ in_y,
    float* __restrict__ out_mul_0) {
  const int lane = threadIdx.x & 31;
  const int warp = threadIdx.x >> 5;
  const int nwarps = blockDim.x >> 5;
  // mul_0 [GRID,CTA];
  for (int blk = blockIdx.x; blk < 1024; blk += gridDim.x) {
    const int row_lo = blk * 1;
    const int row_hi = min(row_lo + 1, 1024);
    for (int idx = row_lo * 1024 + threadIdx.x; idx < row_hi * 1024; idx += blockDim.x) {
      const float v_x_1 = in_x[idx];
      const float v_exp_0_2 = expf(v_x_1);
      const float v_y_3 = in_y[idx];
      const float v_add_0_4 = v_exp_0_2 + v_y_3;
      const float v_mul_0_5 = v_add_0_4 * v_exp_0_2;
      out_mul_0[idx] = v_mul_0_5;
    }
  }
}
