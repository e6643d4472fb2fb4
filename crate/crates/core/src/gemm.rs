//! Cache-blocked general matrix multiply.
//!
//! Classic three-level blocking: the `nc`-wide column block of B and the
//! `kc`-deep slice of the reduction are packed into `NR`-wide panels, the
//! `mc`-high row block of A into `MR`-high panels, and a register-tiled
//! microkernel computes one `MR x NR` tile of C per panel pair. Operands are
//! strided views, so transposes cost nothing beyond the packing pass.
//!
//! The microkernel is plain Rust written so LLVM vectorizes the `NR` loop.
//! For a fixed blocking the reduction order inside every C element is fixed,
//! so results do not depend on how callers split the column range.

use std::any::TypeId;

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

#[derive(Debug)]
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

impl<'a, T: Scalar> MatRef<'a, T> {
    /// View `rows x cols` elements of `data`; element `(i, j)` lives at `i*rs + j*cs`.
    pub fn new(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix view");
        assert!(max_offset(rows, cols, rs, cs) < data.len(), "matrix view exceeds buffer");
        MatRef { data, rows, cols, rs, cs }
    }

    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }

    pub fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    /// Columns `start..start+count`.
    pub fn cols_range(self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.cols && count > 0);
        MatRef { data: &self.data[start * self.cs..], rows: self.rows, cols: count, rs: self.rs, cs: self.cs }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.rs + j * self.cs]
    }
}

impl<'a, T: Scalar> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix view");
        assert!(max_offset(rows, cols, rs, cs) < data.len(), "matrix view exceeds buffer");
        MatMut { data, rows, cols, rs, cs }
    }

    pub fn row_major(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }
}

/// Block sizes for [`gemm_with`]. Defaults target a 32-48 KiB L1 and a
/// 1-2 MiB L2 for `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocking {
    pub mc: usize,
    pub kc: usize,
    pub nc: usize,
}

impl Default for Blocking {
    fn default() -> Self {
        Blocking { mc: 128, kc: 256, nc: 3072 }
    }
}

/// Reusable packing buffers.
#[derive(Debug, Default, Clone)]
pub struct GemmWorkspace<T> {
    apack: Vec<T>,
    bpack: Vec<T>,
}

impl<T: Scalar> GemmWorkspace<T> {
    pub fn new() -> Self {
        GemmWorkspace { apack: Vec::new(), bpack: Vec::new() }
    }
}

/// `C = A * B`, or `C += A * B` when `accumulate` is set.
pub fn gemm<T: Scalar>(a: MatRef<T>, b: MatRef<T>, c: MatMut<T>, accumulate: bool) {
    let mut ws = GemmWorkspace::new();
    gemm_with(a, b, c, accumulate, Blocking::default(), &mut ws);
}

pub fn gemm_with<T: Scalar>(
    a: MatRef<T>,
    b: MatRef<T>,
    c: MatMut<T>,
    accumulate: bool,
    blocking: Blocking,
    ws: &mut GemmWorkspace<T>,
) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "row counts differ");
    assert_eq!(b.cols, c.cols, "column counts differ");
    #[cfg(target_arch = "x86_64")]
    if TypeId::of::<T>() == TypeId::of::<f32>() {
        if std::arch::is_x86_feature_detected!("avx512f") {
            return gemm_blocked::<T, simd::Avx512>(a, b, c, accumulate, blocking, ws);
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            return gemm_blocked::<T, simd::Avx2>(a, b, c, accumulate, blocking, ws);
        }
    }
    gemm_blocked::<T, Portable>(a, b, c, accumulate, blocking, ws)
}

/// Register-tile kernel: computes the `MR x NR` product of one packed A panel
/// and one packed B panel into `tile` (row-major, `NR` columns).
trait Kernel {
    const MR: usize;
    const NR: usize;

    /// # Safety
    /// Panels hold `kc * MR` and `kc * NR` elements, `tile` holds `MR * NR`,
    /// and the CPU supports the kernel's instruction set.
    unsafe fn run<T: Scalar>(kc: usize, apanel: &[T], bpanel: &[T], tile: &mut [T]);
}

struct Portable;

impl Kernel for Portable {
    const MR: usize = 8;
    const NR: usize = 8;

    unsafe fn run<T: Scalar>(kc: usize, apanel: &[T], bpanel: &[T], tile: &mut [T]) {
        let mut acc = [[T::zero(); 8]; 8];
        for (ap, bp) in apanel[..kc * 8].chunks_exact(8).zip(bpanel[..kc * 8].chunks_exact(8)) {
            for i in 0..8 {
                let av = ap[i];
                for j in 0..8 {
                    acc[i][j] = av.mul_add(bp[j], acc[i][j]);
                }
            }
        }
        for (row, out) in acc.iter().zip(tile.chunks_exact_mut(8)) {
            out.copy_from_slice(row);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    use super::Kernel;
    use crate::tensor::Scalar;

    pub struct Avx512;

    impl Kernel for Avx512 {
        const MR: usize = 8;
        const NR: usize = 32;

        unsafe fn run<T: Scalar>(kc: usize, apanel: &[T], bpanel: &[T], tile: &mut [T]) {
            debug_assert!(apanel.len() >= kc * 8 && bpanel.len() >= kc * 32 && tile.len() >= 256);
            kernel_avx512(kc, apanel.as_ptr().cast(), bpanel.as_ptr().cast(), tile.as_mut_ptr().cast())
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn kernel_avx512(kc: usize, a: *const f32, b: *const f32, tile: *mut f32) {
        let mut c = [_mm512_setzero_ps(); 16];
        for p in 0..kc {
            let b0 = _mm512_loadu_ps(b.add(p * 32));
            let b1 = _mm512_loadu_ps(b.add(p * 32 + 16));
            let ap = a.add(p * 8);
            for i in 0..8 {
                let av = _mm512_set1_ps(*ap.add(i));
                c[2 * i] = _mm512_fmadd_ps(av, b0, c[2 * i]);
                c[2 * i + 1] = _mm512_fmadd_ps(av, b1, c[2 * i + 1]);
            }
        }
        for i in 0..8 {
            _mm512_storeu_ps(tile.add(i * 32), c[2 * i]);
            _mm512_storeu_ps(tile.add(i * 32 + 16), c[2 * i + 1]);
        }
    }

    pub struct Avx2;

    impl Kernel for Avx2 {
        const MR: usize = 8;
        const NR: usize = 8;

        unsafe fn run<T: Scalar>(kc: usize, apanel: &[T], bpanel: &[T], tile: &mut [T]) {
            debug_assert!(apanel.len() >= kc * 8 && bpanel.len() >= kc * 8 && tile.len() >= 64);
            kernel_avx2(kc, apanel.as_ptr().cast(), bpanel.as_ptr().cast(), tile.as_mut_ptr().cast())
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn kernel_avx2(kc: usize, a: *const f32, b: *const f32, tile: *mut f32) {
        let mut c = [_mm256_setzero_ps(); 8];
        for p in 0..kc {
            let bv = _mm256_loadu_ps(b.add(p * 8));
            let ap = a.add(p * 8);
            for i in 0..8 {
                c[i] = _mm256_fmadd_ps(_mm256_set1_ps(*ap.add(i)), bv, c[i]);
            }
        }
        for i in 0..8 {
            _mm256_storeu_ps(tile.add(i * 8), c[i]);
        }
    }
}

fn gemm_blocked<T: Scalar, K: Kernel>(
    a: MatRef<T>,
    b: MatRef<T>,
    mut c: MatMut<T>,
    accumulate: bool,
    blocking: Blocking,
    ws: &mut GemmWorkspace<T>,
) {
    let (mr_full, nr_full) = (K::MR, K::NR);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mc = round_up(blocking.mc.max(1), mr_full);
    let nc = round_up(blocking.nc.max(1), nr_full);
    let kc = blocking.kc.max(1);

    let b_len = kc * nc.min(round_up(n, nr_full));
    let a_len = kc * mc.min(round_up(m, mr_full));
    if ws.bpack.len() < b_len {
        ws.bpack.resize(b_len, T::zero());
    }
    if ws.apack.len() < a_len {
        ws.apack.resize(a_len, T::zero());
    }
    let mut tile = vec![T::zero(); mr_full * nr_full];

    for jc in (0..n).step_by(nc) {
        let nb = nc.min(n - jc);
        for pc in (0..k).step_by(kc) {
            let kb = kc.min(k - pc);
            pack_b(&mut ws.bpack, b, pc, kb, jc, nb, nr_full);
            let overwrite = !accumulate && pc == 0;
            for ic in (0..m).step_by(mc) {
                let mb = mc.min(m - ic);
                pack_a(&mut ws.apack, a, ic, mb, pc, kb, mr_full);
                let bpanels = &ws.bpack[..kb * round_up(nb, nr_full)];
                let apanels = &ws.apack[..kb * round_up(mb, mr_full)];
                for (jp, bpanel) in bpanels.chunks_exact(kb * nr_full).enumerate() {
                    let j0 = jc + jp * nr_full;
                    let nr = nr_full.min(jc + nb - j0);
                    for (ip, apanel) in apanels.chunks_exact(kb * mr_full).enumerate() {
                        let i0 = ic + ip * mr_full;
                        let mr = mr_full.min(ic + mb - i0);
                        // SAFETY: panel and tile sizes follow from the packing
                        // layout; the instruction set was checked at dispatch.
                        unsafe { K::run(kb, apanel, bpanel, &mut tile) };
                        store_tile(&mut c, &tile, nr_full, i0, j0, mr, nr, overwrite);
                    }
                }
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn store_tile<T: Scalar>(
    c: &mut MatMut<T>,
    tile: &[T],
    tile_cols: usize,
    i0: usize,
    j0: usize,
    mr: usize,
    nr: usize,
    overwrite: bool,
) {
    let (rs, cs) = (c.rs, c.cs);
    if cs == 1 {
        for i in 0..mr {
            let row = &mut c.data[(i0 + i) * rs + j0..][..nr];
            let src = &tile[i * tile_cols..][..nr];
            if overwrite {
                row.copy_from_slice(src);
            } else {
                for (dst, &v) in row.iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
    } else if rs == 1 {
        for j in 0..nr {
            let col = &mut c.data[i0 + (j0 + j) * cs..][..mr];
            for (i, dst) in col.iter_mut().enumerate() {
                let v = tile[i * tile_cols + j];
                if overwrite {
                    *dst = v;
                } else {
                    *dst += v;
                }
            }
        }
    } else {
        for i in 0..mr {
            for j in 0..nr {
                let dst = &mut c.data[(i0 + i) * rs + (j0 + j) * cs];
                let v = tile[i * tile_cols + j];
                if overwrite {
                    *dst = v;
                } else {
                    *dst += v;
                }
            }
        }
    }
}

/// Pack `B[pc..pc+kb, jc..jc+nb]` into `NR`-wide column panels, each stored
/// k-major, zero-padding the last panel.
fn pack_b<T: Scalar>(buf: &mut [T], b: MatRef<T>, pc: usize, kb: usize, jc: usize, nb: usize, nr_full: usize) {
    let panels = nb.div_ceil(nr_full);
    for jp in 0..panels {
        let j0 = jc + jp * nr_full;
        let nr = nr_full.min(jc + nb - j0);
        let panel = &mut buf[jp * kb * nr_full..(jp + 1) * kb * nr_full];
        for (p, dst) in panel.chunks_exact_mut(nr_full).enumerate() {
            let base = (pc + p) * b.rs + j0 * b.cs;
            if b.cs == 1 {
                dst[..nr].copy_from_slice(&b.data[base..base + nr]);
            } else {
                for (j, d) in dst[..nr].iter_mut().enumerate() {
                    *d = b.data[base + j * b.cs];
                }
            }
            dst[nr..].iter_mut().for_each(|d| *d = T::zero());
        }
    }
}

/// Pack `A[ic..ic+mb, pc..pc+kb]` into `mr_full`-high row panels, each stored
/// k-major, zero-padding the last panel.
fn pack_a<T: Scalar>(buf: &mut [T], a: MatRef<T>, ic: usize, mb: usize, pc: usize, kb: usize, mr_full: usize) {
    let panels = mb.div_ceil(mr_full);
    for ip in 0..panels {
        let i0 = ic + ip * mr_full;
        let mr = mr_full.min(ic + mb - i0);
        let panel = &mut buf[ip * kb * mr_full..(ip + 1) * kb * mr_full];
        for (p, dst) in panel.chunks_exact_mut(mr_full).enumerate() {
            let base = i0 * a.rs + (pc + p) * a.cs;
            if a.rs == 1 {
                dst[..mr].copy_from_slice(&a.data[base..base + mr]);
            } else {
                for (i, d) in dst[..mr].iter_mut().enumerate() {
                    *d = a.data[base + i * a.rs];
                }
            }
            dst[mr..].iter_mut().for_each(|d| *d = T::zero());
        }
    }
}

fn round_up(x: usize, to: usize) -> usize {
    x.div_ceil(to) * to
}
