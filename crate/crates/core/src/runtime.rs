// SPDX-License-Identifier: Apache-2.0

//! Composition of the full stack into one application-facing handle.
//!
//! A [`Runtime`] owns an enclave, the scheduler that multiplexes green
//! threads onto its entry slots, the asynchronous system-call bridge, and
//! a file shield whose host I/O is routed through that bridge. Everything
//! an application does — file access, sockets, provisioning — therefore
//! crosses the boundary through the priced, profiled paths.
//!
//! The shield starts keyless unless the enclave configuration carries a
//! pre-installed key; [`Runtime::provision`] fetches the secrets bundle
//! from a provisioning service, checks the released policy text against
//! this enclave's own configuration, and only then installs the file key.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attest::cas;
use crate::attest::quote::{EnclaveQuoter, PlatformSigner};
use crate::attest::registry::SecretsBundle;
use crate::attest::AttestError;
use crate::bridge::{Bridge, HostBackend, OsBackend};
use crate::enclave::{Enclave, EnclaveConfig, EnclaveError};
use crate::fs_shield::{render_policy_file, BridgeIo, FsShield};
use crate::net_shield::BridgeTransport;
use crate::sched::{SchedPolicy, Scheduler};

/// Knobs that shape the runtime around the enclave configuration.
#[derive(Debug, Clone, Copy)]
pub struct RuntimeOptions {
    pub sched_policy: SchedPolicy,
    pub bridge_workers: usize,
    pub bridge_window: usize,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        RuntimeOptions {
            sched_policy: SchedPolicy::RoundRobin,
            bridge_workers: 2,
            bridge_window: 16,
        }
    }
}

/// An enclave with its scheduler, bridge, and file shield wired together.
pub struct Runtime {
    enclave: Arc<Enclave>,
    sched: Scheduler,
    bridge: Arc<Bridge>,
    shield: Arc<FsShield>,
}

impl Runtime {
    /// Stand the stack up over the real host, with default options.
    pub fn new(code: &[u8], config: EnclaveConfig) -> Result<Runtime, EnclaveError> {
        Runtime::with_options(code, config, RuntimeOptions::default())
    }

    pub fn with_options(
        code: &[u8],
        config: EnclaveConfig,
        opts: RuntimeOptions,
    ) -> Result<Runtime, EnclaveError> {
        Runtime::with_backend(code, config, opts, Arc::new(OsBackend::default()))
    }

    /// Full-control constructor for tests that rig the host side.
    pub fn with_backend(
        code: &[u8],
        config: EnclaveConfig,
        opts: RuntimeOptions,
        backend: Arc<dyn HostBackend>,
    ) -> Result<Runtime, EnclaveError> {
        let enclave = Arc::new(Enclave::create(code, config)?);
        let sched = Scheduler::new(enclave.clone(), opts.sched_policy);
        let bridge = Bridge::new(&sched, backend, opts.bridge_workers, opts.bridge_window);
        let shield = Arc::new(FsShield::new(
            enclave.clone(),
            Arc::new(BridgeIo::new(bridge.clone())),
            enclave.config().shield_policies.clone(),
            enclave.config().fs_key,
        ));
        Ok(Runtime {
            enclave,
            sched,
            bridge,
            shield,
        })
    }

    pub fn enclave(&self) -> &Arc<Enclave> {
        &self.enclave
    }

    pub fn sched(&self) -> &Scheduler {
        &self.sched
    }

    pub fn bridge(&self) -> &Arc<Bridge> {
        &self.bridge
    }

    pub fn shield(&self) -> &Arc<FsShield> {
        &self.shield
    }

    /// Run the scheduler until every green thread has finished.
    pub fn run(&self) {
        self.sched.run_to_completion();
    }

    /// Obtain this enclave's secrets from the provisioning service at
    /// `addr`, whose channel identity must match `service_identity`.
    ///
    /// The quote is produced by `signer`, standing in for the platform's
    /// fused key. On release the bundle's policy text is compared against
    /// the policies this enclave was configured with; a mismatch fails
    /// closed, leaving the shield keyless. On success the file key is
    /// installed and the bundle returned for the caller's network
    /// identity needs.
    pub fn provision(
        &self,
        addr: &str,
        service_identity: [u8; 32],
        signer: PlatformSigner,
        seed: u64,
    ) -> Result<SecretsBundle, AttestError> {
        let quoter = EnclaveQuoter::new(self.enclave.clone(), signer);
        let bridge = self.bridge.clone();
        let addr = addr.to_string();
        let handle = self.sched.spawn("provision", move || {
            let sock = bridge
                .tcp_connect(&addr)
                .map_err(|e| AttestError::Malformed(format!("connect failed: {e}")))?;
            let transport = BridgeTransport::new(bridge.clone(), sock);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let got = cas::provision_over(Box::new(transport), &service_identity, &quoter, &mut rng);
            let _ = bridge.tcp_shutdown(sock);
            got
        });
        self.sched.run_to_completion();
        let bundle = handle.join().expect("provisioning thread panicked")?;
        let expected = render_policy_file(&self.enclave.config().shield_policies);
        if bundle.policy_text != expected {
            return Err(AttestError::PolicyMismatch);
        }
        self.shield.set_key(bundle.fs_key);
        Ok(bundle)
    }

    /// Tear the stack down in dependency order.
    pub fn shutdown(self) {
        self.bridge.shutdown();
        self.sched.shutdown();
    }
}
