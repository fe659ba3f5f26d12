// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! Hostcall numbering. The gate jumps through [`HOSTCALL_TABLE`] indexed by
//! the value in `t0`; anything not listed returns `BadHostcall` in `a0`.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    /// Minimal runtime services.
    Core,
    /// Lets the shim obtain sealed pairs it cannot build itself.
    Setup,
    Disk,
    /// Loopback only.
    Net,
    /// CAP_FILE, CAP_CALL and CAP_STREAM.
    Comm,
    /// Two-copy pipe used as the IPC comparison point.
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Hostcall {
    Print = 0,
    Exit = 1,
    Clock = 2,
    Sleep = 3,
    ThreadCreate = 4,
    ThreadJoin = 5,
    Wait = 6,
    Wake = 7,
    Rand = 8,
    Argv = 9,
    Yield = 10,
    Log = 11,
    Seal = 16,
    DiskRead = 32,
    DiskWrite = 33,
    DiskGetsize = 34,
    NetRead = 40,
    NetWrite = 41,
    NetPoll = 42,
    CapAdvertise = 64,
    CapProbe = 65,
    CapRevoke = 66,
    CapCall = 67,
    CapCallJoin = 68,
    CapFileWait = 69,
    CapFileNotify = 70,
    CapStreamRecv = 71,
    CapStreamSend = 72,
    CapStreamPoll = 73,
    PipeOpen = 96,
    PipeWrite = 97,
    PipeRead = 98,
}

#[derive(Clone, Copy, Debug)]
pub struct HostcallInfo {
    pub call: Hostcall,
    pub name: &'static str,
    pub category: Category,
}

macro_rules! table {
    ($($call:ident $name:literal $cat:ident,)*) => {
        pub const HOSTCALL_TABLE: &[HostcallInfo] = &[
            $(HostcallInfo { call: Hostcall::$call, name: $name, category: Category::$cat },)*
        ];
    };
}

table! {
    Print "print" Core,
    Exit "exit" Core,
    Clock "clock" Core,
    Sleep "sleep" Core,
    ThreadCreate "thread_create" Core,
    ThreadJoin "thread_join" Core,
    Wait "wait" Core,
    Wake "wake" Core,
    Rand "rand" Core,
    Argv "argv" Core,
    Yield "yield" Core,
    Log "log" Core,
    Seal "seal" Setup,
    DiskRead "disk_read" Disk,
    DiskWrite "disk_write" Disk,
    DiskGetsize "disk_getsize" Disk,
    NetRead "net_read" Net,
    NetWrite "net_write" Net,
    NetPoll "net_poll" Net,
    CapAdvertise "cap_advertise" Comm,
    CapProbe "cap_probe" Comm,
    CapRevoke "cap_revoke" Comm,
    CapCall "cap_call" Comm,
    CapCallJoin "cap_call_join" Comm,
    CapFileWait "cap_file_wait" Comm,
    CapFileNotify "cap_file_notify" Comm,
    CapStreamRecv "cap_stream_recv" Comm,
    CapStreamSend "cap_stream_send" Comm,
    CapStreamPoll "cap_stream_poll" Comm,
    PipeOpen "pipe_open" Baseline,
    PipeWrite "pipe_write" Baseline,
    PipeRead "pipe_read" Baseline,
}

impl Hostcall {
    pub fn from_id(id: u64) -> Option<Hostcall> {
        HOSTCALL_TABLE.iter().find(|h| h.call as u64 == id).map(|h| h.call)
    }

    pub fn info(self) -> &'static HostcallInfo {
        HOSTCALL_TABLE.iter().find(|h| h.call == self).expect("every hostcall has a table row")
    }
}

/// Number of table rows in `cat`.
pub fn count(cat: Category) -> usize {
    HOSTCALL_TABLE.iter().filter(|h| h.category == cat).count()
}

/// `Seal` selectors.
pub const SEAL_PROGRAM_PAIRS: u64 = 1;

/// `CapAdvertise` and `CapProbe` device kinds.
pub const KIND_FILE: u64 = 0;
pub const KIND_CALL: u64 = 1;
pub const KIND_STREAM: u64 = 2;

/// `CapRevoke` mode: drop the caller's own binding instead of revoking.
pub const REVOKE_DETACH: u64 = 1;

/// `ThreadCreate` function selector meaning "the program's main entry".
pub const THREAD_MAIN: u64 = u64::MAX;
