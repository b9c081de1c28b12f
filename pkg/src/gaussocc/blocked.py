"""Cache-aware blocked splatting kernels (numba) and their benchmark.

Forward: one task per 4x4x4 voxel block. The block's candidate Gaussians are
copied into a small contiguous staging buffer (mean, inverse-covariance upper
triangle, opacity, normalizer, classes) and every voxel of the block splats
from that buffer.

Backward: a per-voxel pass (blocked like the forward) stores the few scalars
each pair needs, then one task per Gaussian walks that Gaussian's voxels and
accumulates its gradient privately. No two tasks write the same row, so no
atomics and the result does not depend on the worker count.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import time
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .core import GaussianParams, OccupancyField, VoxelGrid
from .splatting import (
    LOG_NORM_CONST,
    InvalidGradient,
    NeighborIndex,
    SplatConfig,
    SplatGradients,
    _prepare,
    finalize_gradients,
    gaussian_ranges,
    neighbor_pairs,
    precision_vjp,
    splat_backward,
    splat_forward,
)

BLOCK = 4
# Gaussians staged per chunk inside a block; a block with more candidates is
# processed in several passes over its voxels.
STAGE_CHUNK = 128

_F_MEAN, _F_PINV, _F_OPAC, _F_NORM, _F_CLS = 0, 3, 9, 10, 11


@dataclass
class VoxelBlockPartition:
    block_dims: tuple
    num_blocks: tuple  # blocks per axis
    block_ptr: np.ndarray  # (B+1,)
    block_gauss: np.ndarray  # staged Gaussian ids, block-major, ascending, unique

    @property
    def count(self):
        return int(np.prod(self.num_blocks))

    def voxel_range(self, b, dims):
        nbx, nby, _ = self.num_blocks
        bx, by, bz = b % nbx, (b // nbx) % nby, b // (nbx * nby)
        lo = np.array([bx, by, bz]) * BLOCK
        hi = np.minimum(lo + BLOCK, dims)
        return lo, hi

    def gaussians(self, b):
        return self.block_gauss[self.block_ptr[b] : self.block_ptr[b + 1]]


def partition(grid: VoxelGrid, nbr: NeighborIndex) -> VoxelBlockPartition:
    dims = np.array(grid.dims)
    nblk = -(-dims // BLOCK)
    B = int(np.prod(nblk))
    nx, ny, _ = grid.dims
    counts = np.diff(nbr.voxel_ptr)
    vox = np.repeat(np.arange(grid.num_voxels), counts)
    i = vox % nx
    j = (vox // nx) % ny
    k = vox // (nx * ny)
    blk = (i // BLOCK) + nblk[0] * ((j // BLOCK) + nblk[1] * (k // BLOCK))
    n = max(int(nbr.lo.shape[0]), 1)
    keys = np.unique(blk * n + nbr.voxel_gauss)
    bids = keys // n
    gids = keys % n
    ptr = np.zeros(B + 1, dtype=np.int64)
    np.cumsum(np.bincount(bids, minlength=B), out=ptr[1:])
    return VoxelBlockPartition((BLOCK,) * 3, tuple(int(x) for x in nblk), ptr, gids.astype(np.int64))


def partition_boxes(grid: VoxelGrid, lo, hi) -> VoxelBlockPartition:
    """Same partition as `partition`, built from per-Gaussian index boxes.

    A Gaussian is staged in a block iff its box meets the block, which is
    exactly when one of the block's voxels lists it as a neighbor.
    """
    dims = np.array(grid.dims)
    nblk = -(-dims // BLOCK)
    B = int(np.prod(nblk))
    n = lo.shape[0]
    nonempty = np.all(hi >= lo, axis=1)
    blo = np.where(nonempty[:, None], lo // BLOCK, 0)
    bhi = np.where(nonempty[:, None], hi // BLOCK, -1)
    ext = np.maximum(bhi - blo + 1, 0)
    counts = ext.prod(axis=1)
    total = int(counts.sum())
    gid = np.repeat(np.arange(n, dtype=np.int64), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total, dtype=np.int64) - start
    ex, ey = ext[gid, 0], ext[gid, 1]
    bx = blo[gid, 0] + local % ex
    by = blo[gid, 1] + (local // ex) % ey
    bz = blo[gid, 2] + local // (ex * ey)
    keys = np.sort((bx + nblk[0] * (by + nblk[1] * bz)) * max(n, 1) + gid)
    bids = keys // max(n, 1)
    ptr = np.zeros(B + 1, dtype=np.int64)
    np.cumsum(np.bincount(bids, minlength=B), out=ptr[1:])
    return VoxelBlockPartition((BLOCK,) * 3, tuple(int(x) for x in nblk), ptr, (keys % max(n, 1)).astype(np.int64))


def _pack(params: GaussianParams, lo, hi):
    """Per-Gaussian packed rows used for staging."""
    prep = _prepare(params)
    n, C = len(params), params.num_classes
    pk = np.empty((n, _F_CLS + C))
    pinv = np.einsum("nij,nj,nkj->nik", prep.R, prep.inv_s**2, prep.R)
    pk[:, 0:3] = params.means
    pk[:, 3] = pinv[:, 0, 0]
    pk[:, 4] = pinv[:, 0, 1]
    pk[:, 5] = pinv[:, 0, 2]
    pk[:, 6] = pinv[:, 1, 1]
    pk[:, 7] = pinv[:, 1, 2]
    pk[:, 8] = pinv[:, 2, 2]
    pk[:, _F_OPAC] = prep.opac
    pk[:, _F_NORM] = prep.inv_norm
    pk[:, _F_CLS:] = prep.classes
    ranges = np.concatenate([lo, hi], axis=1).astype(np.int64)
    return pk, ranges, prep


@njit(cache=True, fastmath=False)
def _block_voxels(b, nblk, dims):
    bx = b % nblk[0]
    by = (b // nblk[0]) % nblk[1]
    bz = b // (nblk[0] * nblk[1])
    i0, j0, k0 = bx * 4, by * 4, bz * 4
    ni = min(4, dims[0] - i0)
    nj = min(4, dims[1] - j0)
    nk = min(4, dims[2] - k0)
    return i0, j0, k0, ni, nj, nk


@njit(cache=True)
def _splat_block(b, nblk, dims, origin, vsize, block_ptr, block_gauss, pk, ranges, C, weighted, Pnz, Nz, D, Nm, cnt, buf, brng):
    """Accumulate per-voxel sums for block b.

    Pnz is the product of the nonzero (1 - resp) factors and Nz the number of
    exactly-zero factors, so T = 0 if Nz else Pnz.
    """
    i0, j0, k0, ni, nj, nk = _block_voxels(b, nblk, dims)
    nvox = ni * nj * nk
    for lv in range(nvox):
        Pnz[lv] = 1.0
        Nz[lv] = 0
        D[lv] = 0.0
        cnt[lv] = 0
        for c in range(C):
            Nm[lv, c] = 0.0
    s = block_ptr[b]
    e = block_ptr[b + 1]
    F = pk.shape[1]
    visits = 0
    c0 = s
    while c0 < e:
        m = min(buf.shape[0], e - c0)
        for t in range(m):
            gid = block_gauss[c0 + t]
            for f in range(F):
                buf[t, f] = pk[gid, f]
            for f in range(6):
                brng[t, f] = ranges[gid, f]
        for t in range(m):
            # intersect the Gaussian's voxel box with this block
            il = max(brng[t, 0], i0)
            jl = max(brng[t, 1], j0)
            kl = max(brng[t, 2], k0)
            ih = min(brng[t, 3], i0 + ni - 1)
            jh = min(brng[t, 4], j0 + nj - 1)
            kh = min(brng[t, 5], k0 + nk - 1)
            mx, my, mz = buf[t, 0], buf[t, 1], buf[t, 2]
            p00, p01, p02, p11, p12, p22 = buf[t, 3], buf[t, 4], buf[t, 5], buf[t, 6], buf[t, 7], buf[t, 8]
            a = buf[t, 9]
            an = a * buf[t, 10]
            for k in range(kl, kh + 1):
                dz = origin[2] + (k + 0.5) * vsize[2] - mz
                for j in range(jl, jh + 1):
                    dy = origin[1] + (j + 0.5) * vsize[1] - my
                    for i in range(il, ih + 1):
                        dx = origin[0] + (i + 0.5) * vsize[0] - mx
                        lv = (i - i0) + ni * ((j - j0) + nj * (k - k0))
                        visits += 1
                        cnt[lv] += 1
                        q = p00 * dx * dx + p11 * dy * dy + p22 * dz * dz + 2.0 * (p01 * dx * dy + p02 * dx * dz + p12 * dy * dz)
                        G = math.exp(-0.5 * q)
                        resp = a * G if weighted else G
                        fac = 1.0 - resp
                        if fac == 0.0:
                            Nz[lv] += 1
                        else:
                            Pnz[lv] *= fac
                        beta = an * G
                        D[lv] += beta
                        for c in range(C):
                            Nm[lv, c] += beta * buf[t, 11 + c]
        c0 += m
    return visits


@njit(parallel=True, cache=True)
def _forward_kernel(order, nblk, dims, origin, vsize, block_ptr, block_gauss, pk, ranges, C, weighted, floor, out, floored, visits, s_pnz, s_nz, s_d, s_nm, s_cnt, s_buf, s_rng):
    nx, ny = dims[0], dims[1]
    for ii in prange(order.shape[0]):
        b = order[ii]
        tid = numba.get_thread_id()
        Pnz = s_pnz[tid]
        Nz = s_nz[tid]
        D = s_d[tid]
        Nm = s_nm[tid]
        cnt = s_cnt[tid]
        buf = s_buf[tid]
        brng = s_rng[tid]
        visits[b] = _splat_block(b, nblk, dims, origin, vsize, block_ptr, block_gauss, pk, ranges, C, weighted, Pnz, Nz, D, Nm, cnt, buf, brng)
        i0, j0, k0, ni, nj, nk = _block_voxels(b, nblk, dims)
        for lv in range(ni * nj * nk):
            v = (i0 + lv % ni) + nx * ((j0 + (lv // ni) % nj) + ny * (k0 + lv // (ni * nj)))
            T = 0.0 if Nz[lv] > 0 else Pnz[lv]
            alpha = 1.0 - T
            if cnt[lv] == 0:
                for c in range(C):
                    out[v, c] = 0.0
                out[v, C] = 1.0
                floored[v] = False
                continue
            if D[lv] < floor:
                floored[v] = True
                for c in range(C):
                    out[v, c] = alpha / C
            else:
                floored[v] = False
                for c in range(C):
                    out[v, c] = alpha * Nm[lv, c] / D[lv]
            out[v, C] = T


@njit(parallel=True, cache=True)
def _voxel_state_kernel(order, nblk, dims, origin, vsize, block_ptr, block_gauss, pk, ranges, C, weighted, floor, upstream, state, s_pnz, s_nz, s_d, s_nm, s_cnt, s_buf, s_rng):
    """state columns: alpha, dL/dalpha, prod of nonzero (1-resp), #zero factors, 1/D (0 if floored), <A_e, e>."""
    nx, ny = dims[0], dims[1]
    for ii in prange(order.shape[0]):
        b = order[ii]
        tid = numba.get_thread_id()
        Pnz = s_pnz[tid]
        Nz = s_nz[tid]
        D = s_d[tid]
        Nm = s_nm[tid]
        cnt = s_cnt[tid]
        buf = s_buf[tid]
        brng = s_rng[tid]
        _splat_block(b, nblk, dims, origin, vsize, block_ptr, block_gauss, pk, ranges, C, weighted, Pnz, Nz, D, Nm, cnt, buf, brng)
        i0, j0, k0, ni, nj, nk = _block_voxels(b, nblk, dims)
        for lv in range(ni * nj * nk):
            v = (i0 + lv % ni) + nx * ((j0 + (lv // ni) % nj) + ny * (k0 + lv // (ni * nj)))
            if cnt[lv] == 0:
                for f in range(6):
                    state[v, f] = 0.0
                continue
            alpha = 1.0 - (0.0 if Nz[lv] > 0 else Pnz[lv])
            floored = D[lv] < floor
            a_alpha = -upstream[v, C]
            aee = 0.0
            for c in range(C):
                ec = 1.0 / C if floored else Nm[lv, c] / D[lv]
                a_alpha += upstream[v, c] * ec
                aee += alpha * upstream[v, c] * ec
            state[v, 0] = alpha
            state[v, 1] = a_alpha
            state[v, 2] = Pnz[lv]
            state[v, 3] = Nz[lv]
            state[v, 4] = 0.0 if floored else 1.0 / D[lv]
            state[v, 5] = aee


@njit(parallel=True, cache=True)
def _fused_backward_kernel(order, nblk, dims, origin, vsize, block_ptr, block_gauss, pk, ranges, C, weighted, floor, upstream, partial, visits, s_pnz, s_nz, s_d, s_nm, s_cnt, s_buf, s_rng, s_up, s_st):
    """Per block: voxel state from the staged Gaussians, then per-(block, Gaussian) partial gradients.

    partial[slot] belongs to exactly one (block, Gaussian) pair, so blocks never
    write to shared rows. partial columns: mean(3), dL/dP upper(6), normalizer
    log-scale term(1), opacity(1), classes(C).
    """
    nx, ny = dims[0], dims[1]
    for ii in prange(order.shape[0]):
        b = order[ii]
        tid = numba.get_thread_id()
        Pnz = s_pnz[tid]
        Nz = s_nz[tid]
        D = s_d[tid]
        Nm = s_nm[tid]
        cnt = s_cnt[tid]
        up = s_up[tid]
        st = s_st[tid]
        _splat_block(b, nblk, dims, origin, vsize, block_ptr, block_gauss, pk, ranges, C, weighted, Pnz, Nz, D, Nm, cnt, s_buf[tid], s_rng[tid])
        i0, j0, k0, ni, nj, nk = _block_voxels(b, nblk, dims)
        for lv in range(ni * nj * nk):
            v = (i0 + lv % ni) + nx * ((j0 + (lv // ni) % nj) + ny * (k0 + lv // (ni * nj)))
            for c in range(C + 1):
                up[lv, c] = upstream[v, c]
            if cnt[lv] == 0:
                continue
            alpha = 1.0 - (0.0 if Nz[lv] > 0 else Pnz[lv])
            floored = D[lv] < floor
            a_alpha = -up[lv, C]
            aee = 0.0
            for c in range(C):
                ec = 1.0 / C if floored else Nm[lv, c] / D[lv]
                a_alpha += up[lv, c] * ec
                aee += alpha * up[lv, c] * ec
            st[lv, 0] = alpha
            st[lv, 1] = a_alpha
            st[lv, 2] = Pnz[lv]
            st[lv, 3] = Nz[lv]
            st[lv, 4] = 0.0 if floored else 1.0 / D[lv]
            st[lv, 5] = aee
        vis = 0
        for slot in range(block_ptr[b], block_ptr[b + 1]):
            g = block_gauss[slot]
            il = max(ranges[g, 0], i0)
            jl = max(ranges[g, 1], j0)
            kl = max(ranges[g, 2], k0)
            ih = min(ranges[g, 3], i0 + ni - 1)
            jh = min(ranges[g, 4], j0 + nj - 1)
            kh = min(ranges[g, 5], k0 + nk - 1)
            mx, my, mz = pk[g, 0], pk[g, 1], pk[g, 2]
            p00, p01, p02, p11, p12, p22 = pk[g, 3], pk[g, 4], pk[g, 5], pk[g, 6], pk[g, 7], pk[g, 8]
            a = pk[g, 9]
            inv_norm = pk[g, 10]
            for f in range(partial.shape[1]):
                partial[slot, f] = 0.0
            for k in range(kl, kh + 1):
                dz = origin[2] + (k + 0.5) * vsize[2] - mz
                for j in range(jl, jh + 1):
                    dy = origin[1] + (j + 0.5) * vsize[1] - my
                    for i in range(il, ih + 1):
                        dx = origin[0] + (i + 0.5) * vsize[0] - mx
                        lv = (i - i0) + ni * ((j - j0) + nj * (k - k0))
                        vis += 1
                        pdx = p00 * dx + p01 * dy + p02 * dz
                        pdy = p01 * dx + p11 * dy + p12 * dz
                        pdz = p02 * dx + p12 * dy + p22 * dz
                        G = math.exp(-0.5 * (dx * pdx + dy * pdy + dz * pdz))
                        resp = a * G if weighted else G
                        fac = 1.0 - resp
                        if fac == 0.0:
                            t_excl = st[lv, 2] if st[lv, 3] == 1.0 else 0.0
                        else:
                            t_excl = 0.0 if st[lv, 3] > 0.0 else st[lv, 2] / fac
                        d_resp = st[lv, 1] * t_excl
                        dinv = st[lv, 4]
                        beta = a * G * inv_norm
                        d_beta = 0.0
                        if dinv != 0.0:
                            alpha = st[lv, 0]
                            ac = 0.0
                            w = alpha * beta * dinv
                            for c in range(C):
                                ac += up[lv, c] * pk[g, 11 + c]
                                partial[slot, 11 + c] += w * up[lv, c]
                            d_beta = (alpha * ac - st[lv, 5]) * dinv
                        if weighted:
                            dG = d_resp * a + d_beta * a * inv_norm
                            partial[slot, 10] += d_resp * G + d_beta * G * inv_norm
                        else:
                            dG = d_resp + d_beta * a * inv_norm
                            partial[slot, 10] += d_beta * G * inv_norm
                        partial[slot, 9] -= d_beta * beta
                        dq = -0.5 * G * dG
                        partial[slot, 0] -= 2.0 * dq * pdx
                        partial[slot, 1] -= 2.0 * dq * pdy
                        partial[slot, 2] -= 2.0 * dq * pdz
                        partial[slot, 3] += dq * dx * dx
                        partial[slot, 4] += dq * dx * dy
                        partial[slot, 5] += dq * dx * dz
                        partial[slot, 6] += dq * dy * dy
                        partial[slot, 7] += dq * dy * dz
                        partial[slot, 8] += dq * dz * dz
        visits[b] = vis


@njit(parallel=True, cache=True)
def _reduce_slots_kernel(gorder, gslot_ptr, gslot, partial, out):
    """One worker per Gaussian sums that Gaussian's block partials in block order."""
    F = partial.shape[1]
    for ii in prange(gorder.shape[0]):
        g = gorder[ii]
        for f in range(F):
            acc = 0.0
            for t in range(gslot_ptr[g], gslot_ptr[g + 1]):
                acc += partial[gslot[t], f]
            out[g, f] = acc


@njit(parallel=True, cache=True)
def _gaussian_grad_kernel(order, dims, origin, vsize, ranges, pk, upstream, state, C, weighted, g_mean, g_P, g_lsn, g_a, g_c, visits):
    nx, ny = dims[0], dims[1]
    for ii in prange(order.shape[0]):
        g = order[ii]
        mx, my, mz = pk[g, 0], pk[g, 1], pk[g, 2]
        p00, p01, p02, p11, p12, p22 = pk[g, 3], pk[g, 4], pk[g, 5], pk[g, 6], pk[g, 7], pk[g, 8]
        a = pk[g, 9]
        inv_norm = pk[g, 10]
        acc_m0 = 0.0
        acc_m1 = 0.0
        acc_m2 = 0.0
        acc_p00 = 0.0
        acc_p01 = 0.0
        acc_p02 = 0.0
        acc_p11 = 0.0
        acc_p12 = 0.0
        acc_p22 = 0.0
        acc_ls = 0.0
        acc_a = 0.0
        acc_c = np.zeros(C)
        cnt = 0
        bx = max(ranges[g, 3] - ranges[g, 0] + 1, 0)
        by = max(ranges[g, 4] - ranges[g, 1] + 1, 0)
        bz = max(ranges[g, 5] - ranges[g, 2] + 1, 0)
        # the Gaussian's voxel box, x fastest: the same order as NeighborIndex.gauss_voxels
        for t in range(bx * by * bz):
            i = ranges[g, 0] + t % bx
            j = ranges[g, 1] + (t // bx) % by
            k = ranges[g, 2] + t // (bx * by)
            v = i + nx * (j + ny * k)
            cnt += 1
            dx = origin[0] + (i + 0.5) * vsize[0] - mx
            dy = origin[1] + (j + 0.5) * vsize[1] - my
            dz = origin[2] + (k + 0.5) * vsize[2] - mz
            pdx = p00 * dx + p01 * dy + p02 * dz
            pdy = p01 * dx + p11 * dy + p12 * dz
            pdz = p02 * dx + p12 * dy + p22 * dz
            q = dx * pdx + dy * pdy + dz * pdz
            G = math.exp(-0.5 * q)
            resp = a * G if weighted else G
            fac = 1.0 - resp
            alpha = state[v, 0]
            pnz = state[v, 2]
            nz = state[v, 3]
            if fac == 0.0:
                t_excl = pnz if nz == 1.0 else 0.0
            else:
                t_excl = 0.0 if nz > 0.0 else pnz / fac
            d_resp = state[v, 1] * t_excl
            dinv = state[v, 4]
            beta = a * G * inv_norm
            d_beta = 0.0
            if dinv != 0.0:
                ac = 0.0
                for c in range(C):
                    ac += upstream[v, c] * pk[g, 11 + c]
                    acc_c[c] += alpha * upstream[v, c] * beta * dinv
                d_beta = (alpha * ac - state[v, 5]) * dinv
            if weighted:
                dG = d_resp * a + d_beta * a * inv_norm
                acc_a += d_resp * G + d_beta * G * inv_norm
            else:
                dG = d_resp + d_beta * a * inv_norm
                acc_a += d_beta * G * inv_norm
            acc_ls -= d_beta * beta
            dq = -0.5 * G * dG
            acc_m0 -= 2.0 * dq * pdx
            acc_m1 -= 2.0 * dq * pdy
            acc_m2 -= 2.0 * dq * pdz
            acc_p00 += dq * dx * dx
            acc_p01 += dq * dx * dy
            acc_p02 += dq * dx * dz
            acc_p11 += dq * dy * dy
            acc_p12 += dq * dy * dz
            acc_p22 += dq * dz * dz
        g_mean[g, 0] = acc_m0
        g_mean[g, 1] = acc_m1
        g_mean[g, 2] = acc_m2
        g_P[g, 0] = acc_p00
        g_P[g, 1] = acc_p01
        g_P[g, 2] = acc_p02
        g_P[g, 3] = acc_p11
        g_P[g, 4] = acc_p12
        g_P[g, 5] = acc_p22
        g_lsn[g] = acc_ls
        g_a[g] = acc_a
        for c in range(C):
            g_c[g, c] = acc_c[c]
        visits[g] = cnt


def _scratch(C, F):
    """Per-worker scratch buffers, indexed by numba thread id."""
    nt = numba.config.NUMBA_NUM_THREADS
    return (
        np.empty((nt, 64)),
        np.empty((nt, 64), dtype=np.int64),
        np.empty((nt, 64)),
        np.empty((nt, 64, C)),
        np.empty((nt, 64), dtype=np.int64),
        np.empty((nt, STAGE_CHUNK, F)),
        np.empty((nt, STAGE_CHUNK, 6), dtype=np.int64),
    )


def _set_threads(cfg: SplatConfig):
    if cfg.threads:
        numba.set_num_threads(max(1, min(int(cfg.threads), numba.config.NUMBA_NUM_THREADS)))


def _block_order(part: VoxelBlockPartition, cfg: SplatConfig):
    if cfg.deterministic:
        return np.arange(part.count, dtype=np.int64)
    # fast mode: heaviest blocks first for load balance; output is unchanged
    work = np.diff(part.block_ptr)
    return np.argsort(-work, kind="stable").astype(np.int64)


@dataclass
class BlockedContext:
    """Neighbor index + partition + packed parameters, reusable across passes."""

    part: VoxelBlockPartition
    pk: np.ndarray
    ranges: np.ndarray
    gslot_ptr: np.ndarray  # (N+1,) per-Gaussian runs in gslot
    gslot: np.ndarray  # partition slots grouped by Gaussian, block-ascending

    @property
    def box_sizes(self):
        ext = np.maximum(self.ranges[:, 3:] - self.ranges[:, :3] + 1, 0)
        return ext.prod(axis=1)


def prepare_blocked(params: GaussianParams, grid: VoxelGrid, cfg: SplatConfig, nbr: NeighborIndex | None = None) -> BlockedContext:
    if nbr is None:
        lo, hi = gaussian_ranges(params.means, params.scales, grid, cfg.cutoff_sigma)
    else:
        lo, hi = nbr.lo, nbr.hi
    part = partition_boxes(grid, lo, hi)
    pk, ranges, _ = _pack(params, lo, hi)
    n = len(params)
    gslot = np.argsort(part.block_gauss, kind="stable").astype(np.int64)
    gslot_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(part.block_gauss, minlength=n), out=gslot_ptr[1:])
    return BlockedContext(part, pk, ranges, gslot_ptr, gslot)


def _grid_args(grid):
    return np.array(grid.dims, dtype=np.int64), grid.origin.astype(np.float64), grid.voxel_size.astype(np.float64)


def splat_forward_blocked(params: GaussianParams, grid: VoxelGrid, cfg: SplatConfig, ctx: BlockedContext | None = None, stats: dict | None = None) -> OccupancyField:
    C = params.num_classes
    V = grid.num_voxels
    if len(params) == 0:
        out = np.zeros((V, C + 1))
        out[:, C] = 1.0
        return OccupancyField(out, grid.dims, np.zeros(V, dtype=bool))
    # every row is written by exactly one block
    out = np.empty((V, C + 1))
    floored = np.empty(V, dtype=bool)
    _set_threads(cfg)
    if ctx is None:
        ctx = prepare_blocked(params, grid, cfg)
    dims, origin, vsize = _grid_args(grid)
    part = ctx.part
    visits = np.zeros(part.count, dtype=np.int64)
    _forward_kernel(
        _block_order(part, cfg), np.array(part.num_blocks, dtype=np.int64), dims, origin, vsize,
        part.block_ptr, part.block_gauss, ctx.pk, ctx.ranges, C, bool(cfg.opacity_weighted),
        float(cfg.weight_floor), out, floored, visits, *_scratch(C, ctx.pk.shape[1]),
    )
    if stats is not None:
        stats["forward_pair_visits"] = int(visits.sum())
    return OccupancyField(out, grid.dims, floored)


def splat_backward_blocked(params: GaussianParams, grid: VoxelGrid, cfg: SplatConfig, upstream, ctx: BlockedContext | None = None, stats: dict | None = None) -> SplatGradients:
    C = params.num_classes
    n = len(params)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (grid.num_voxels, C + 1):
        raise ValueError(f"upstream shape {upstream.shape} != {(grid.num_voxels, C + 1)}")
    if not np.all(np.isfinite(upstream)):
        raise InvalidGradient("non-finite upstream gradient")
    if n == 0:
        return SplatGradients.zeros(0, C)
    _set_threads(cfg)
    if ctx is None:
        ctx = prepare_blocked(params, grid, cfg)
    dims, origin, vsize = _grid_args(grid)
    part = ctx.part
    weighted = bool(cfg.opacity_weighted)
    nblk = np.array(part.num_blocks, dtype=np.int64)
    if cfg.deterministic:
        gorder = np.arange(n, dtype=np.int64)
    else:
        gorder = np.argsort(-ctx.box_sizes, kind="stable").astype(np.int64)

    if cfg.backward_mode == "fused":
        F = 11 + C
        partial = np.empty((part.block_gauss.size, F))
        visits = np.zeros(part.count, dtype=np.int64)
        nt = numba.config.NUMBA_NUM_THREADS
        _fused_backward_kernel(
            _block_order(part, cfg), nblk, dims, origin, vsize, part.block_ptr, part.block_gauss,
            ctx.pk, ctx.ranges, C, weighted, float(cfg.weight_floor), upstream, partial, visits,
            *_scratch(C, ctx.pk.shape[1]), np.empty((nt, 64, C + 1)), np.empty((nt, 64, 6)),
        )
        red = np.empty((n, F))
        _reduce_slots_kernel(gorder, ctx.gslot_ptr, ctx.gslot, partial, red)
        g_mean, g_P, g_lsn, g_a, g_c = red[:, 0:3], red[:, 3:9], red[:, 9], red[:, 10], red[:, 11:]
    elif cfg.backward_mode == "transpose":
        state = np.empty((grid.num_voxels, 6))
        _voxel_state_kernel(
            _block_order(part, cfg), nblk, dims, origin, vsize, part.block_ptr, part.block_gauss,
            ctx.pk, ctx.ranges, C, weighted, float(cfg.weight_floor), upstream, state,
            *_scratch(C, ctx.pk.shape[1]),
        )
        g_mean = np.zeros((n, 3))
        g_P = np.zeros((n, 6))
        g_lsn = np.zeros(n)
        g_a = np.zeros(n)
        g_c = np.zeros((n, C))
        visits = np.zeros(n, dtype=np.int64)
        _gaussian_grad_kernel(
            gorder, dims, origin, vsize, ctx.ranges, ctx.pk, upstream, state, C, weighted,
            g_mean, g_P, g_lsn, g_a, g_c, visits,
        )
    else:
        raise ValueError(f"unknown backward_mode {cfg.backward_mode!r}")
    if stats is not None:
        stats["backward_pair_visits"] = int(visits.sum())

    g_R, g_ls = precision_vjp(params.quats, params.log_scales, g_P)
    g_ls += g_lsn[:, None]
    return finalize_gradients(params, params.opacities, params.classes, g_mean, g_R, g_ls, np.ascontiguousarray(g_a), np.ascontiguousarray(g_c))


# ---------------------------------------------------------------------------
# benchmark


def bench_scene(spec: dict):
    """Random Gaussians spread over a grid, as described by a bench spec."""
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    dims = tuple(spec.get("grid", (200, 200, 16)))
    vs = float(spec.get("voxel_size", 0.5))
    C = int(spec.get("num_classes", 16))
    n = int(spec.get("gaussians", 9000))
    lo_s, hi_s = spec.get("scale_range", (0.1, 0.4))
    grid = VoxelGrid(np.zeros(3), vs, dims, C)
    extent = np.array(dims) * vs
    params = GaussianParams(
        means=rng.uniform(0, 1, (n, 3)) * extent,
        quats=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(lo_s, hi_s, (n, 3))),
        opacity_logits=rng.normal(size=n),
        class_logits=rng.normal(size=(n, C)),
    )
    return params, grid


def _median_ms(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench(scene_spec: dict, repetitions: int = 5, cfg: SplatConfig | None = None) -> dict:
    if repetitions < 3:
        raise ValueError("bench needs at least 3 repetitions (median is reported)")
    cfg = cfg or SplatConfig(cutoff_sigma=float(scene_spec.get("cutoff_sigma", 3.0)))
    _set_threads(cfg)
    params, grid = bench_scene(scene_spec)
    nbr = neighbor_pairs(params, grid, cfg.cutoff_sigma)
    rng = np.random.default_rng(1)
    upstream = rng.normal(size=(grid.num_voxels, params.num_classes + 1))

    # JIT warm-up outside the timed region
    small_p, small_g = bench_scene({"gaussians": 8, "grid": (8, 8, 4), "num_classes": params.num_classes, "voxel_size": 0.5})
    sctx = prepare_blocked(small_p, small_g, cfg)
    splat_forward_blocked(small_p, small_g, cfg, sctx)
    splat_backward_blocked(small_p, small_g, cfg, np.zeros((small_g.num_voxels, params.num_classes + 1)), sctx)

    holder = {}

    def blocked_fwd():
        holder["ctx"] = ctx = prepare_blocked(params, grid, cfg, nbr)
        splat_forward_blocked(params, grid, cfg, ctx)

    naive_fwd = _median_ms(lambda: splat_forward(params, grid, cfg, nbr), repetitions)
    blocked_fwd_ms = _median_ms(blocked_fwd, repetitions)
    naive_bwd = _median_ms(lambda: splat_backward(params, grid, cfg, upstream, nbr), repetitions)
    blocked_bwd_ms = _median_ms(lambda: splat_backward_blocked(params, grid, cfg, upstream, holder["ctx"]), repetitions)
    return {
        "gaussians": len(params),
        "grid": list(grid.dims),
        "voxels": grid.num_voxels,
        "num_classes": params.num_classes,
        "pairs": nbr.num_pairs,
        "threads": int(numba.get_num_threads()),
        "hardware_threads": os.cpu_count(),
        "repetitions": repetitions,
        "naive_fwd_ms": naive_fwd,
        "blocked_fwd_ms": blocked_fwd_ms,
        "naive_bwd_ms": naive_bwd,
        "blocked_bwd_ms": blocked_bwd_ms,
        "speedups": {
            "forward": naive_fwd / blocked_fwd_ms,
            "backward": naive_bwd / blocked_bwd_ms,
        },
    }


def bench_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


__all__ = [
    "BLOCK",
    "LOG_NORM_CONST",
    "BlockedContext",
    "VoxelBlockPartition",
    "bench",
    "bench_scene",
    "partition",
    "prepare_blocked",
    "splat_backward_blocked",
    "splat_forward_blocked",
]
