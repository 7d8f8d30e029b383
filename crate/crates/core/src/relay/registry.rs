use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::Rng;

use super::{ChannelKey, RejectReason, RelayError, Role};

enum Slot<C> {
    Free,
    Parked(C),
    Attached,
}

impl<C> Slot<C> {
    fn is_free(&self) -> bool {
        matches!(self, Slot::Free)
    }
}

struct Entry<C> {
    key: ChannelKey,
    created_at: Instant,
    sender: Slot<C>,
    receiver: Slot<C>,
    paired: bool,
}

impl<C> Entry<C> {
    fn slot(&mut self, role: Role) -> &mut Slot<C> {
        match role {
            Role::Sender => &mut self.sender,
            Role::Receiver => &mut self.receiver,
        }
    }
}

pub enum AttachOutcome<C> {
    Parked,
    Paired { sender: C, receiver: C },
}

/// Channel table shared by the signaling and relay listeners. `C` is the
/// parked connection type.
pub struct ChannelRegistry<C> {
    entries: HashMap<u64, Entry<C>>,
    ttl: Duration,
    max_channels: usize,
}

impl<C> ChannelRegistry<C> {
    pub fn new(ttl: Duration, max_channels: usize) -> Self {
        Self {
            entries: HashMap::new(),
            ttl,
            max_channels,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Creates the channel on first use and returns its key. Repeated
    /// requests for a role that has not attached yet return the same key.
    pub fn register(&mut self, role: Role, channel_id: u64, now: Instant) -> Result<ChannelKey, RelayError> {
        let _ = self.evict_expired(now);
        if let Some(entry) = self.entries.get_mut(&channel_id) {
            if !entry.slot(role).is_free() {
                return Err(RelayError::Conflict { channel_id, role });
            }
            return Ok(entry.key);
        }
        if self.entries.len() >= self.max_channels {
            return Err(RelayError::Capacity(self.max_channels));
        }
        let key: ChannelKey = rand::thread_rng().gen();
        self.entries.insert(
            channel_id,
            Entry {
                key,
                created_at: now,
                sender: Slot::Free,
                receiver: Slot::Free,
                paired: false,
            },
        );
        Ok(key)
    }

    pub fn attach(
        &mut self,
        role: Role,
        channel_id: u64,
        key: &ChannelKey,
        conn: C,
        now: Instant,
    ) -> Result<AttachOutcome<C>, (RejectReason, C)> {
        let _ = self.evict_expired(now);
        let Some(entry) = self.entries.get_mut(&channel_id) else {
            return Err((RejectReason::UnknownChannel, conn));
        };
        if entry.key != *key {
            return Err((RejectReason::BadKey, conn));
        }
        if !entry.slot(role).is_free() {
            return Err((RejectReason::RoleTaken, conn));
        }
        let other = match role {
            Role::Sender => Role::Receiver,
            Role::Receiver => Role::Sender,
        };
        match std::mem::replace(entry.slot(other), Slot::Free) {
            Slot::Parked(peer) => {
                *entry.slot(other) = Slot::Attached;
                *entry.slot(role) = Slot::Attached;
                entry.paired = true;
                let (sender, receiver) = match role {
                    Role::Sender => (conn, peer),
                    Role::Receiver => (peer, conn),
                };
                Ok(AttachOutcome::Paired { sender, receiver })
            }
            previous => {
                *entry.slot(other) = previous;
                *entry.slot(role) = Slot::Parked(conn);
                Ok(AttachOutcome::Parked)
            }
        }
    }

    /// Removes channels never paired within the TTL, returning any parked
    /// connections so the caller can close them.
    pub fn evict_expired(&mut self, now: Instant) -> Vec<C> {
        let ttl = self.ttl;
        let expired: Vec<u64> = self
            .entries
            .iter()
            .filter(|(_, e)| !e.paired && now.duration_since(e.created_at) >= ttl)
            .map(|(&id, _)| id)
            .collect();
        let mut parked = Vec::new();
        for id in expired {
            if let Some(e) = self.entries.remove(&id) {
                log::debug!("channel {id} expired unpaired");
                for slot in [e.sender, e.receiver] {
                    if let Slot::Parked(c) = slot {
                        parked.push(c);
                    }
                }
            }
        }
        parked
    }

    /// Ends a paired channel's grant.
    pub fn finish(&mut self, channel_id: u64) {
        self.entries.remove(&channel_id);
    }

    /// Removes every channel, returning parked connections.
    pub fn clear(&mut self) -> Vec<C> {
        let mut parked = Vec::new();
        for (_, e) in self.entries.drain() {
            for slot in [e.sender, e.receiver] {
                if let Slot::Parked(c) = slot {
                    parked.push(c);
                }
            }
        }
        parked
    }
}
