// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

//! Deployment configuration files.
//!
//! The format is flat `key=value` text, one setting per line, `#` starts a
//! comment. Each `name=` line opens a new cVM block, so one file can
//! describe several cVMs:
//!
//! ```text
//! name=server
//! heap_size=1M
//! stack_count=4
//! stack_size=64K
//! program=kv_server
//! allow key=kv*,rights=rw,peer=client
//!
//! name=client
//! program=kv_client
//! args=1000
//! ```

use std::path::PathBuf;

use crate::error::Error;

pub const DEFAULT_HEAP: u64 = 1 << 20;
pub const DEFAULT_STACK_COUNT: usize = 4;
pub const DEFAULT_STACK_SIZE: u64 = 64 << 10;

/// Access rights granted by an `allow` entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rights {
    pub read: bool,
    pub write: bool,
}

impl Rights {
    pub const R: Rights = Rights { read: true, write: false };
    pub const W: Rights = Rights { read: false, write: true };
    pub const RW: Rights = Rights { read: true, write: true };

    fn parse(s: &str) -> Option<Rights> {
        match s {
            "r" => Some(Self::R),
            "w" => Some(Self::W),
            "rw" | "wr" => Some(Self::RW),
            _ => None,
        }
    }
}

/// One access-control entry. `key` may end in `*` to match a prefix; `peer`
/// is a cVM name or `*`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AclEntry {
    pub key: String,
    pub rights: Rights,
    pub peer: String,
}

impl AclEntry {
    pub fn new(key: impl Into<String>, rights: Rights, peer: impl Into<String>) -> Self {
        Self { key: key.into(), rights, peer: peer.into() }
    }

    pub fn matches(&self, key: &[u8], peer: &str) -> bool {
        let key_ok = match self.key.strip_suffix('*') {
            Some(prefix) => key.starts_with(prefix.as_bytes()),
            None => key == self.key.as_bytes(),
        };
        key_ok && (self.peer == "*" || self.peer == peer)
    }
}

/// Union of the rights every matching entry grants, or `None` if nothing
/// matches (default deny).
pub fn acl_rights(acl: &[AclEntry], key: &[u8], peer: &str) -> Option<Rights> {
    acl.iter()
        .filter(|e| e.matches(key, peer))
        .map(|e| e.rights)
        .reduce(|a, b| Rights { read: a.read || b.read, write: a.write || b.write })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeploymentConfig {
    pub name: String,
    pub heap_size: u64,
    pub stack_count: usize,
    pub stack_size: u64,
    pub disk_image: Option<PathBuf>,
    /// Programs sharing this cVM's libOS. Usually one.
    pub programs: Vec<String>,
    pub args: Vec<String>,
    pub allow: Vec<AclEntry>,
}

impl DeploymentConfig {
    pub fn new(name: impl Into<String>, program: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            heap_size: DEFAULT_HEAP,
            stack_count: DEFAULT_STACK_COUNT,
            stack_size: DEFAULT_STACK_SIZE,
            disk_image: None,
            programs: vec![program.into()],
            args: Vec::new(),
            allow: Vec::new(),
        }
    }

    pub fn with_program(mut self, program: impl Into<String>) -> Self {
        self.programs.push(program.into());
        self
    }

    pub fn with_args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.args = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_heap(mut self, heap: u64) -> Self {
        self.heap_size = heap;
        self
    }

    pub fn with_stacks(mut self, count: usize, size: u64) -> Self {
        self.stack_count = count;
        self.stack_size = size;
        self
    }

    pub fn with_disk(mut self, path: impl Into<PathBuf>) -> Self {
        self.disk_image = Some(path.into());
        self
    }

    pub fn allow(mut self, key: &str, rights: Rights, peer: &str) -> Self {
        self.allow.push(AclEntry::new(key, rights, peer));
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("{}: {m}", self.name)));
        if self.name.is_empty() {
            return Err(Error::ConfigInvalid("missing name".into()));
        }
        if self.heap_size == 0 {
            return bad("heap_size must be positive");
        }
        if self.stack_count == 0 {
            return bad("stack_count must be at least 1");
        }
        if self.stack_size == 0 {
            return bad("stack_size must be positive");
        }
        if self.programs.is_empty() {
            return bad("no program");
        }
        Ok(())
    }
}

/// Parses a size such as `4096`, `64K` or `1M`.
pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let (num, mult) = match s.char_indices().last()? {
        (i, 'K' | 'k') => (&s[..i], 1u64 << 10),
        (i, 'M' | 'm') => (&s[..i], 1 << 20),
        _ => (s, 1),
    };
    num.trim().parse::<u64>().ok()?.checked_mul(mult)
}

fn parse_allow(line: usize, fields: &str) -> Result<AclEntry, Error> {
    let err = |m: String| Error::ConfigInvalid(format!("line {line}: {m}"));
    let (mut key, mut rights, mut peer) = (None, None, None);
    for part in fields.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| err(format!("malformed allow field `{part}`")))?;
        match k.trim() {
            "key" => key = Some(v.trim().to_string()),
            "rights" => {
                rights = Some(Rights::parse(v.trim()).ok_or_else(|| err(format!("bad rights `{v}`")))?)
            }
            "peer" => peer = Some(v.trim().to_string()),
            other => return Err(err(format!("unknown allow field `{other}`"))),
        }
    }
    Ok(AclEntry {
        key: key.ok_or_else(|| err("allow without key".into()))?,
        rights: rights.unwrap_or(Rights::R),
        peer: peer.unwrap_or_else(|| "*".into()),
    })
}

/// Parses a configuration file into one config per cVM block.
pub fn parse_configs(text: &str) -> Result<Vec<DeploymentConfig>, Error> {
    let mut out: Vec<DeploymentConfig> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| Error::ConfigInvalid(format!("line {line_no}: {m}"));
        if let Some(rest) = line.strip_prefix("allow ") {
            let cur = out.last_mut().ok_or_else(|| err("allow before name".into()))?;
            cur.allow.push(parse_allow(line_no, rest.trim())?);
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "name" {
            if value.is_empty() {
                return Err(err("empty name".into()));
            }
            let mut cfg = DeploymentConfig::new(value, "");
            cfg.programs.clear();
            out.push(cfg);
            continue;
        }
        let cur = out.last_mut().ok_or_else(|| err(format!("`{key}` before name")))?;
        let size = |v: &str| parse_size(v).ok_or_else(|| err(format!("bad size `{v}`")));
        match key {
            "heap_size" => cur.heap_size = size(value)?,
            "stack_size" => cur.stack_size = size(value)?,
            "stack_count" => {
                cur.stack_count = value.parse().map_err(|_| err(format!("bad stack_count `{value}`")))?
            }
            "disk_image" => cur.disk_image = Some(PathBuf::from(value)),
            "program" => cur
                .programs
                .extend(value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from)),
            "args" => cur.args = value.split_whitespace().map(String::from).collect(),
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    if out.is_empty() {
        return Err(Error::ConfigInvalid("no cVM defined".into()));
    }
    for cfg in &out {
        cfg.validate()?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096"), Some(4096));
        assert_eq!(parse_size("64K"), Some(65536));
        assert_eq!(parse_size("1M"), Some(1 << 20));
        assert_eq!(parse_size("x"), None);
        assert_eq!(parse_size(""), None);
    }

    #[test]
    fn two_blocks_with_acl() {
        let cfgs = parse_configs(
            "# demo\nname=a\nheap_size=2M\nprogram=producer\nallow key=buf*,rights=r,peer=b\n\
             name=b\nprogram=consumer, hello\nargs=x y\n",
        )
        .unwrap();
        assert_eq!(cfgs.len(), 2);
        assert_eq!(cfgs[0].heap_size, 2 << 20);
        assert_eq!(cfgs[0].allow[0], AclEntry::new("buf*", Rights::R, "b"));
        assert_eq!(cfgs[1].programs, ["consumer", "hello"]);
        assert_eq!(cfgs[1].args, ["x", "y"]);
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let e = parse_configs("name=a\nprogram=hello\nbogus=1\n").unwrap_err();
        assert!(matches!(e, Error::ConfigInvalid(ref m) if m.contains("line 3")), "{e}");
        assert!(parse_configs("heap_size=1M\n").is_err());
        assert!(parse_configs("name=a\n").is_err());
        assert!(parse_configs("name=a\nprogram=hello\nstack_count=0\n").is_err());
    }

    #[test]
    fn acl_matching() {
        let acl = vec![AclEntry::new("kv*", Rights::R, "*"), AclEntry::new("kv", Rights::W, "client")];
        assert_eq!(acl_rights(&acl, b"kv", "client"), Some(Rights::RW));
        assert_eq!(acl_rights(&acl, b"kvx", "client"), Some(Rights::R));
        assert_eq!(acl_rights(&acl, b"other", "client"), None);
    }
}
