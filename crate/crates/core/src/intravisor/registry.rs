// Copyright 2026 The capvm Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::sync::Arc;

use crate::capmachine::{Capability, CvmId};
use crate::commdev::{CallTarget, DeviceKind, Signal, StreamChannel};
use crate::error::Error;

use super::config::AclEntry;

pub enum Payload {
    File {
        /// Donor-derived RW capability with exactly the advertised bounds.
        cap: Capability,
        signal: Arc<Signal>,
    },
    Call(CallTarget),
    Stream(Arc<StreamChannel>),
}

impl Payload {
    pub fn kind(&self) -> DeviceKind {
        match self {
            Payload::File { .. } => DeviceKind::File,
            Payload::Call(_) => DeviceKind::Call,
            Payload::Stream(_) => DeviceKind::Stream,
        }
    }
}

pub struct RegistryEntry {
    pub id: u64,
    pub key: Vec<u8>,
    pub donor: CvmId,
    pub payload: Payload,
    pub acl: Vec<AclEntry>,
    pub epoch: u64,
    /// Shared by every capability granted from this entry.
    pub(crate) lineage: u32,
    /// `(cvm, binding index)` of every holder, donor included.
    pub(crate) bindings: Vec<(CvmId, usize)>,
}

impl RegistryEntry {
    pub fn kind(&self) -> DeviceKind {
        self.payload.kind()
    }
}

/// Key registry. Callers hold it behind one lock so that probe and revoke
/// are linearizable.
#[derive(Default)]
pub struct Registry {
    by_key: HashMap<Vec<u8>, u64>,
    entries: HashMap<u64, RegistryEntry>,
    next_id: u64,
    epoch: u64,
}

impl Registry {
    pub fn insert(
        &mut self,
        key: &[u8],
        donor: CvmId,
        payload: Payload,
        acl: Vec<AclEntry>,
        lineage: u32,
    ) -> Result<&mut RegistryEntry, Error> {
        if self.by_key.contains_key(key) {
            return Err(Error::DuplicateKey);
        }
        self.next_id += 1;
        self.epoch += 1;
        let id = self.next_id;
        self.by_key.insert(key.to_vec(), id);
        Ok(self.entries.entry(id).or_insert(RegistryEntry {
            id,
            key: key.to_vec(),
            donor,
            payload,
            acl,
            epoch: self.epoch,
            lineage,
            bindings: Vec::new(),
        }))
    }

    pub fn by_key(&mut self, key: &[u8]) -> Option<&mut RegistryEntry> {
        let id = *self.by_key.get(key)?;
        self.entries.get_mut(&id)
    }

    pub fn get(&self, id: u64) -> Option<&RegistryEntry> {
        self.entries.get(&id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut RegistryEntry> {
        self.entries.get_mut(&id)
    }

    pub fn remove(&mut self, id: u64) -> Option<RegistryEntry> {
        let e = self.entries.remove(&id)?;
        self.by_key.remove(&e.key);
        Some(e)
    }

    /// Current epoch; bumps on every successful insert.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> Vec<(Vec<u8>, DeviceKind)> {
        self.entries.values().map(|e| (e.key.clone(), e.kind())).collect()
    }
}
