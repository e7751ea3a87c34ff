"""Raw memory access and atomics for numba kernels.

Agent and behavior records live in memory handed out by the allocators in
:mod:`agentsim.alloc`, so kernels address them by integer address.  numba
has no CPU atomics, hence the small set of LLVM intrinsics below.
"""

from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic
from llvmlite import ir

_I8P = ir.IntType(8).as_pointer()
_I64 = ir.IntType(64)
_F64 = ir.DoubleType()


def _extern(builder, name, ret, argtys):
    fnty = ir.FunctionType(ret, argtys)
    return cgutils.get_or_insert_function(builder.module, fnty, name)


@intrinsic
def load_i64(typingctx, addr):
    sig = types.int64(types.int64)

    def codegen(context, builder, signature, args):
        return builder.load(builder.inttoptr(args[0], _I64.as_pointer()))

    return sig, codegen


@intrinsic
def store_i64(typingctx, addr, val):
    sig = types.void(types.int64, types.int64)

    def codegen(context, builder, signature, args):
        builder.store(args[1], builder.inttoptr(args[0], _I64.as_pointer()))
        return context.get_dummy_value()

    return sig, codegen


@intrinsic
def load_f64(typingctx, addr):
    sig = types.float64(types.int64)

    def codegen(context, builder, signature, args):
        return builder.load(builder.inttoptr(args[0], _F64.as_pointer()))

    return sig, codegen


@intrinsic
def store_f64(typingctx, addr, val):
    sig = types.void(types.int64, types.float64)

    def codegen(context, builder, signature, args):
        builder.store(args[1], builder.inttoptr(args[0], _F64.as_pointer()))
        return context.get_dummy_value()

    return sig, codegen


@intrinsic
def atomic_or_addr(typingctx, addr, val):
    """Atomically OR ``val`` into the int64 word at ``addr``; returns the old word."""
    sig = types.int64(types.int64, types.int64)

    def codegen(context, builder, signature, args):
        ptr = builder.inttoptr(args[0], _I64.as_pointer())
        return builder.atomic_rmw("or", ptr, args[1], "monotonic")

    return sig, codegen


@intrinsic
def atomic_and_addr(typingctx, addr, val):
    sig = types.int64(types.int64, types.int64)

    def codegen(context, builder, signature, args):
        ptr = builder.inttoptr(args[0], _I64.as_pointer())
        return builder.atomic_rmw("and", ptr, args[1], "monotonic")

    return sig, codegen


def _array_slot(context, builder, aryty, ary, idx):
    arr = context.make_array(aryty)(context, builder, ary)
    return builder.gep(arr.data, [idx])


@intrinsic
def atomic_xchg(typingctx, arr, idx, val):
    """Atomic exchange on ``arr[idx]`` (int64 array); returns the old value."""
    sig = types.int64(arr, types.intp, types.int64)

    def codegen(context, builder, signature, args):
        ptr = _array_slot(context, builder, signature.args[0], args[0], args[1])
        return builder.atomic_rmw("xchg", ptr, args[2], "acq_rel")

    return sig, codegen


@intrinsic
def atomic_add(typingctx, arr, idx, val):
    sig = types.int64(arr, types.intp, types.int64)

    def codegen(context, builder, signature, args):
        ptr = _array_slot(context, builder, signature.args[0], args[0], args[1])
        return builder.atomic_rmw("add", ptr, args[2], "acq_rel")

    return sig, codegen


@intrinsic
def atomic_cas(typingctx, arr, idx, expected, new):
    """Compare-and-swap on ``arr[idx]``; True if the swap happened."""
    sig = types.boolean(arr, types.intp, types.int64, types.int64)

    def codegen(context, builder, signature, args):
        ptr = _array_slot(context, builder, signature.args[0], args[0], args[1])
        res = builder.cmpxchg(ptr, args[2], args[3], "acq_rel", "monotonic")
        return builder.extract_value(res, 1)

    return sig, codegen


@intrinsic
def atomic_store(typingctx, arr, idx, val):
    sig = types.void(arr, types.intp, types.int64)

    def codegen(context, builder, signature, args):
        ptr = _array_slot(context, builder, signature.args[0], args[0], args[1])
        builder.atomic_rmw("xchg", ptr, args[2], "release")
        return context.get_dummy_value()

    return sig, codegen


@intrinsic
def sys_malloc(typingctx, size):
    sig = types.int64(types.int64)

    def codegen(context, builder, signature, args):
        fn = _extern(builder, "malloc", _I8P, [_I64])
        return builder.ptrtoint(builder.call(fn, [args[0]]), _I64)

    return sig, codegen


@intrinsic
def sys_free(typingctx, addr):
    sig = types.void(types.int64)

    def codegen(context, builder, signature, args):
        fn = _extern(builder, "free", ir.VoidType(), [_I8P])
        builder.call(fn, [builder.inttoptr(args[0], _I8P)])
        return context.get_dummy_value()

    return sig, codegen


@intrinsic
def cpu_yield(typingctx):
    sig = types.int32()

    def codegen(context, builder, signature, args):
        fn = _extern(builder, "sched_yield", ir.IntType(32), [])
        return builder.call(fn, [])

    return sig, codegen


@njit(nogil=True, cache=True)
def spin_lock(arr, idx):
    spins = 0
    while not atomic_cas(arr, idx, 0, 1):
        spins += 1
        if spins > 64:
            cpu_yield()
            spins = 0


@njit(nogil=True, cache=True)
def spin_unlock(arr, idx):
    atomic_store(arr, idx, 0)


@njit(nogil=True, cache=True)
def copy_words(dst, src, nwords):
    for w in range(nwords):
        store_i64(dst + 8 * w, load_i64(src + 8 * w))


# Thin Python-callable wrappers, used by record views and tests.

@njit(cache=True)
def peek_i64(addr):
    return load_i64(addr)


@njit(cache=True)
def poke_i64(addr, val):
    store_i64(addr, val)


@njit(cache=True)
def peek_f64(addr):
    return load_f64(addr)


@njit(cache=True)
def poke_f64(addr, val):
    store_f64(addr, val)


@njit(cache=True)
def malloc(size):
    return sys_malloc(size)


@njit(cache=True)
def free(addr):
    sys_free(addr)
