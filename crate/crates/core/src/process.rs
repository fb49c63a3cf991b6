// SPDX-License-Identifier: Apache-2.0

//! Thin wrappers over process signalling.

use std::io;

pub fn pid_alive(pid: i32) -> bool {
    if pid <= 0 {
        return false;
    }
    // SAFETY: signal 0 only checks for existence and permission.
    let r = unsafe { libc::kill(pid, 0) };
    r == 0 || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

/// Sends `sig` to `pid`; `false` if the process does not exist.
pub fn send_signal(pid: i32, sig: i32) -> bool {
    if pid <= 0 {
        return false;
    }
    // SAFETY: plain syscall, pid validated above.
    unsafe { libc::kill(pid, sig) == 0 }
}

/// Sends `sig` to the process group led by `pgid`.
pub fn signal_group(pgid: i32, sig: i32) -> bool {
    if pgid <= 1 {
        return false;
    }
    // SAFETY: plain syscall on a group id validated above.
    unsafe { libc::kill(-pgid, sig) == 0 }
}

/// True if `pid` is a zombie or gone, i.e. will never run again.
pub fn pid_exited(pid: i32) -> bool {
    if !pid_alive(pid) {
        return true;
    }
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        // state is the first field after the parenthesised command name
        Ok(stat) => stat
            .rsplit_once(')')
            .and_then(|(_, rest)| rest.split_whitespace().next())
            .is_some_and(|s| s == "Z" || s == "X"),
        Err(_) => true,
    }
}
