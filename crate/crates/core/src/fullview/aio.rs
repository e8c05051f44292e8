//! Thin wrapper over the Linux kernel asynchronous I/O syscalls
//! (`io_setup`, `io_submit`, `io_getevents`, `io_destroy`).

use std::io;
use std::os::fd::RawFd;
use std::ptr;

const IOCB_CMD_PREAD: u16 = 0;

/// `struct iocb` from `linux/aio_abi.h` (little-endian field order).
#[repr(C)]
#[derive(Default)]
struct Iocb {
    aio_data: u64,
    aio_key: u32,
    aio_rw_flags: i32,
    aio_lio_opcode: u16,
    aio_reqprio: i16,
    aio_fildes: u32,
    aio_buf: u64,
    aio_nbytes: u64,
    aio_offset: i64,
    aio_reserved2: u64,
    aio_flags: u32,
    aio_resfd: u32,
}

#[repr(C)]
#[derive(Default, Clone, Copy)]
struct IoEvent {
    data: u64,
    obj: u64,
    res: i64,
    res2: i64,
}

/// A single read request: fill `len` bytes at `buf` from file `offset`.
pub(crate) struct ReadReq {
    pub tag: u64,
    pub buf: *mut u8,
    pub len: usize,
    pub offset: u64,
}

/// A completed request: its tag and the byte count or errno.
pub(crate) struct Completion {
    pub tag: u64,
    pub result: io::Result<usize>,
}

pub(crate) struct AioContext {
    ctx: libc::c_ulong,
    capacity: usize,
    iocbs: Vec<Iocb>,
    ptrs: Vec<*mut Iocb>,
    events: Vec<IoEvent>,
}

// SAFETY: the context handle may be used from any thread; the raw pointer
// scratch space is only touched through &mut self.
unsafe impl Send for AioContext {}

impl AioContext {
    pub fn new(capacity: usize) -> io::Result<Self> {
        let mut ctx: libc::c_ulong = 0;
        // SAFETY: io_setup writes the new context id into `ctx`.
        let rc = unsafe { libc::syscall(libc::SYS_io_setup, capacity as libc::c_long, &mut ctx as *mut _) };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(Self {
            ctx,
            capacity,
            iocbs: Vec::with_capacity(capacity),
            ptrs: Vec::with_capacity(capacity),
            events: vec![IoEvent::default(); capacity],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Submits up to `capacity` reads in one call, then hands each
    /// completion to `on_complete` in the order the kernel reports them.
    ///
    /// # Safety
    /// Every `buf` must stay valid for `len` writable bytes until this
    /// function returns.
    pub unsafe fn read_batch(
        &mut self,
        fd: RawFd,
        reqs: &[ReadReq],
        mut on_complete: impl FnMut(Completion) -> io::Result<()>,
    ) -> io::Result<()> {
        assert!(reqs.len() <= self.capacity);
        self.iocbs.clear();
        self.ptrs.clear();
        for r in reqs {
            self.iocbs.push(Iocb {
                aio_data: r.tag,
                aio_lio_opcode: IOCB_CMD_PREAD,
                aio_fildes: fd as u32,
                aio_buf: r.buf as u64,
                aio_nbytes: r.len as u64,
                aio_offset: r.offset as i64,
                ..Default::default()
            });
        }
        for cb in self.iocbs.iter_mut() {
            self.ptrs.push(cb as *mut Iocb);
        }

        let mut submitted = 0usize;
        while submitted < reqs.len() {
            let rc = libc::syscall(
                libc::SYS_io_submit,
                self.ctx,
                (reqs.len() - submitted) as libc::c_long,
                self.ptrs.as_mut_ptr().add(submitted),
            );
            if rc < 0 {
                let err = io::Error::last_os_error();
                if err.kind() == io::ErrorKind::Interrupted || err.raw_os_error() == Some(libc::EAGAIN) {
                    continue;
                }
                // reap what is already in flight before reporting
                self.reap(submitted, &mut |_| Ok(()))?;
                return Err(err);
            }
            submitted += rc as usize;
        }
        self.reap(submitted, &mut on_complete)
    }

    unsafe fn reap(&mut self, mut pending: usize, on_complete: &mut impl FnMut(Completion) -> io::Result<()>) -> io::Result<()> {
        let mut first_err = None;
        while pending > 0 {
            let rc = libc::syscall(
                libc::SYS_io_getevents,
                self.ctx,
                1 as libc::c_long,
                pending as libc::c_long,
                self.events.as_mut_ptr(),
                ptr::null_mut::<libc::timespec>(),
            );
            if rc < 0 {
                let err = io::Error::last_os_error();
                if err.kind() == io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(err);
            }
            for ev in &self.events[..rc as usize] {
                let result = if ev.res < 0 {
                    Err(io::Error::from_raw_os_error(-ev.res as i32))
                } else {
                    Ok(ev.res as usize)
                };
                if let Err(e) = on_complete(Completion { tag: ev.data, result }) {
                    first_err.get_or_insert(e);
                }
            }
            pending -= rc as usize;
        }
        first_err.map_or(Ok(()), Err)
    }
}

impl Drop for AioContext {
    fn drop(&mut self) {
        // SAFETY: ctx came from io_setup and is destroyed exactly once.
        unsafe {
            libc::syscall(libc::SYS_io_destroy, self.ctx);
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn abi_sizes() {
        assert_eq!(std::mem::size_of::<super::Iocb>(), 64);
        assert_eq!(std::mem::size_of::<super::IoEvent>(), 32);
    }
}
