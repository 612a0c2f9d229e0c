//! Communication and client-computation accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientCost {
    pub uploads: u64,
    pub downloads: u64,
    pub upload_params: u64,
    pub upload_bytes: u64,
    pub download_params: u64,
    pub download_bytes: u64,
    pub train_flops: u64,
}

/// Append-only counters per client. Every counter only grows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub method: String,
    pub rounds: u64,
    pub clients: Vec<ClientCost>,
}

impl CostLedger {
    pub fn new(method: impl Into<String>, num_clients: usize) -> Self {
        Self {
            method: method.into(),
            rounds: 0,
            clients: vec![ClientCost::default(); num_clients],
        }
    }

    fn client(&mut self, k: usize) -> Result<&mut ClientCost> {
        let n = self.clients.len();
        self.clients
            .get_mut(k)
            .ok_or_else(|| Error::invalid(format!("client {k} not in a ledger of {n}")))
    }

    pub fn record_upload(&mut self, k: usize, params: u64, bytes: u64) -> Result<()> {
        let c = self.client(k)?;
        c.uploads += 1;
        c.upload_params += params;
        c.upload_bytes += bytes;
        Ok(())
    }

    pub fn record_download(&mut self, k: usize, params: u64, bytes: u64) -> Result<()> {
        let c = self.client(k)?;
        c.downloads += 1;
        c.download_params += params;
        c.download_bytes += bytes;
        Ok(())
    }

    pub fn record_flops(&mut self, k: usize, flops: u64) -> Result<()> {
        self.client(k)?.train_flops += flops;
        Ok(())
    }

    pub fn end_round(&mut self) {
        self.rounds += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub upload_params: u64,
    pub download_params: u64,
    pub total_params: u64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub total_bytes: u64,
    pub train_flops: u64,
    pub rounds: u64,
}

/// Exact column totals over all clients.
pub fn ledger_report(ledger: &CostLedger) -> LedgerReport {
    let sum = |f: fn(&ClientCost) -> u64| ledger.clients.iter().map(f).sum::<u64>();
    let upload_params = sum(|c| c.upload_params);
    let download_params = sum(|c| c.download_params);
    let upload_bytes = sum(|c| c.upload_bytes);
    let download_bytes = sum(|c| c.download_bytes);
    LedgerReport {
        upload_params,
        download_params,
        total_params: upload_params + download_params,
        upload_bytes,
        download_bytes,
        total_bytes: upload_bytes + download_bytes,
        train_flops: sum(|c| c.train_flops),
        rounds: ledger.rounds,
    }
}
