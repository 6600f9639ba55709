"""Indexed binary min-heap over flat cell ids, keyed by an external value array (numba)."""

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _swap(heap, pos, a, b):
    ca = heap[a]
    cb = heap[b]
    heap[a] = cb
    heap[b] = ca
    pos[cb] = a
    pos[ca] = b


@numba.njit(cache=True)
def sift_up(heap, pos, key, k):
    while k > 0:
        parent = (k - 1) >> 1
        if key[heap[k]] < key[heap[parent]]:
            _swap(heap, pos, k, parent)
            k = parent
        else:
            break


@numba.njit(cache=True)
def sift_down(heap, pos, key, k, size):
    while True:
        left = 2 * k + 1
        if left >= size:
            break
        child = left
        right = left + 1
        if right < size and key[heap[right]] < key[heap[left]]:
            child = right
        if key[heap[child]] < key[heap[k]]:
            _swap(heap, pos, k, child)
            k = child
        else:
            break


@numba.njit(cache=True)
def push_or_decrease(heap, pos, key, size, cell):
    """Insert ``cell`` (or restore order after its key decreased); returns the new size."""
    if pos[cell] < 0:
        heap[size] = cell
        pos[cell] = size
        sift_up(heap, pos, key, size)
        return size + 1
    sift_up(heap, pos, key, pos[cell])
    return size


@numba.njit(cache=True)
def pop_min(heap, pos, key, size):
    """Remove the minimum; returns ``(cell, new_size)``."""
    top = heap[0]
    size -= 1
    if size > 0:
        last = heap[size]
        heap[0] = last
        pos[last] = 0
        sift_down(heap, pos, key, 0, size)
    pos[top] = -2
    return top, size


def new_heap(n):
    return np.empty(n, dtype=np.int64), np.full(n, -1, dtype=np.int64)
