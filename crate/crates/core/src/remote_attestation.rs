//! Bootstrapping and remote attestation.
//!
//! Two state machines: the [`Controller`] running on the device and the
//! [`Vendor`] that owns the bitstream and the session secrets.
//!
//! ```text
//! Vendor                                   Controller
//!   begin()        ---- Nonce n ---->
//!                  <--- Cert --------      sign_ctrl(ctrl_bin_cert || n || dh_c)
//!   verify(cert)   ---- Hello ------>      sign_vendor(n || dh_c || dh_v)
//!   seal(bundle)   ---- Sealed ----->      open, install, freeze
//! ```
//!
//! The mutually authenticated channel is a signed ephemeral Diffie-Hellman
//! exchange: X25519, HKDF-SHA-384, then ChaCha20-Poly1305 for the bundle.
//! Signatures are Ed25519, so a certificate is a pure function of the
//! identity and the nonce.

use std::fmt;
use std::ops::Range;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha384};
use x25519_dalek::{PublicKey, StaticSecret};

use crate::device::{DeviceError, Endpoint, SessionSpec};
use crate::kernel::{DeviceId, KernelError, SessionId, SessionKey, KEY_LEN};

pub const NONCE_LEN: usize = 32;
pub const DIGEST_LEN: usize = 48;
pub const CERT_LEN: usize = NONCE_LEN + DIGEST_LEN + 32 + 64 + 32 + 64;
pub const HELLO_LEN: usize = 32 + 64;
const AEAD_NONCE_LEN: usize = 12;

const CERT_DOMAIN: &[u8] = b"tnic/ctrl-cert";
const HELLO_DOMAIN: &[u8] = b"tnic/vendor-hello";
const CHANNEL_INFO: &[u8] = b"tnic/channel";
const DH_INFO: &[u8] = b"tnic/ctrl-dh";
const BUNDLE_AAD: &[u8] = b"tnic/bundle";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttestError {
    #[error("controller certificate is not signed by the device key")]
    BadDeviceSignature,
    #[error("controller measurement does not match the expected binary")]
    MeasurementMismatch,
    #[error("certificate nonce is not the outstanding challenge")]
    StaleNonce,
    #[error("certificate is not signed by the controller key")]
    BadControllerSignature,
    #[error("vendor reply is not signed by the vendor key")]
    BadVendorSignature,
    #[error("provisioning bundle failed authentication")]
    ChannelAuthFailure,
    #[error("{0} is already provisioned")]
    DuplicateSession(SessionId),
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("handshake step out of order")]
    OutOfOrder,
    #[error(transparent)]
    Device(DeviceError),
}

impl From<DeviceError> for AttestError {
    fn from(e: DeviceError) -> Self {
        match e {
            DeviceError::Kernel(KernelError::DuplicateSession(s)) => Self::DuplicateSession(s),
            other => Self::Device(other),
        }
    }
}

pub fn measure(bytes: &[u8]) -> [u8; DIGEST_LEN] {
    Sha384::digest(bytes).into()
}

/// Secrets burned into one device plus the boot-time controller certificate.
pub struct DeviceIdentity {
    hw_key: SigningKey,
    ctrl_key: SigningKey,
    ctrl_bin_digest: [u8; DIGEST_LEN],
    ctrl_bin_cert: Signature,
}

impl fmt::Debug for DeviceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceIdentity")
            .field("hw_pub", &hex::encode(self.hw_public().as_bytes()))
            .field("ctrl_pub", &hex::encode(self.ctrl_public().as_bytes()))
            .finish_non_exhaustive()
    }
}

fn cert_body(digest: &[u8; DIGEST_LEN], ctrl_pub: &[u8; 32]) -> Vec<u8> {
    [digest.as_slice(), ctrl_pub].concat()
}

impl DeviceIdentity {
    /// Manufacturing plus first boot: burns `hw_seed`, generates the
    /// controller keypair and signs the measured controller binary with it.
    pub fn manufacture(hw_seed: [u8; 32], ctrl_seed: [u8; 32], ctrl_bin: &[u8]) -> Self {
        let hw_key = SigningKey::from_bytes(&hw_seed);
        let ctrl_key = SigningKey::from_bytes(&ctrl_seed);
        let ctrl_bin_digest = measure(ctrl_bin);
        let ctrl_bin_cert = hw_key.sign(&cert_body(&ctrl_bin_digest, ctrl_key.verifying_key().as_bytes()));
        Self {
            hw_key,
            ctrl_key,
            ctrl_bin_digest,
            ctrl_bin_cert,
        }
    }

    /// The manufacturer's published verification key for this device.
    pub fn hw_public(&self) -> VerifyingKey {
        self.hw_key.verifying_key()
    }

    pub fn ctrl_public(&self) -> VerifyingKey {
        self.ctrl_key.verifying_key()
    }

    pub fn ctrl_bin_digest(&self) -> &[u8; DIGEST_LEN] {
        &self.ctrl_bin_digest
    }

    /// Deterministic per-nonce DH secret of the controller.
    fn dh_secret(&self, nonce: &[u8; NONCE_LEN]) -> StaticSecret {
        let hk = Hkdf::<Sha384>::new(Some(nonce), self.ctrl_key.as_bytes());
        let mut okm = [0u8; 32];
        hk.expand(DH_INFO, &mut okm).expect("32 bytes is a valid HKDF length");
        StaticSecret::from(okm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttestationCert {
    pub nonce: [u8; NONCE_LEN],
    pub ctrl_bin_digest: [u8; DIGEST_LEN],
    pub ctrl_pub: [u8; 32],
    pub ctrl_bin_cert: [u8; 64],
    pub dh_pub: [u8; 32],
    pub signature: [u8; 64],
}

impl AttestationCert {
    /// Byte ranges of the encoded fields, in encoding order.
    pub const FIELDS: [(&'static str, Range<usize>); 6] = [
        ("nonce", 0..32),
        ("ctrl_bin_digest", 32..80),
        ("ctrl_pub", 80..112),
        ("ctrl_bin_cert", 112..176),
        ("dh_pub", 176..208),
        ("signature", 208..272),
    ];

    fn signed_part(&self) -> Vec<u8> {
        [CERT_DOMAIN, &self.ctrl_bin_cert, &self.nonce, &self.dh_pub].concat()
    }

    pub fn encode(&self) -> Vec<u8> {
        [
            &self.nonce[..],
            &self.ctrl_bin_digest,
            &self.ctrl_pub,
            &self.ctrl_bin_cert,
            &self.dh_pub,
            &self.signature,
        ]
        .concat()
    }

    pub fn decode(b: &[u8]) -> Result<Self, AttestError> {
        if b.len() != CERT_LEN {
            return Err(AttestError::Malformed("certificate"));
        }
        let f = |i: usize| &b[Self::FIELDS[i].1.clone()];
        Ok(Self {
            nonce: f(0).try_into().unwrap(),
            ctrl_bin_digest: f(1).try_into().unwrap(),
            ctrl_pub: f(2).try_into().unwrap(),
            ctrl_bin_cert: f(3).try_into().unwrap(),
            dh_pub: f(4).try_into().unwrap(),
            signature: f(5).try_into().unwrap(),
        })
    }
}

/// Pure certificate generation for `nonce`.
pub fn controller_respond(id: &DeviceIdentity, nonce: [u8; NONCE_LEN]) -> AttestationCert {
    let mut cert = AttestationCert {
        nonce,
        ctrl_bin_digest: id.ctrl_bin_digest,
        ctrl_pub: id.ctrl_public().to_bytes(),
        ctrl_bin_cert: id.ctrl_bin_cert.to_bytes(),
        dh_pub: PublicKey::from(&id.dh_secret(&nonce)).to_bytes(),
        signature: [0; 64],
    };
    cert.signature = id.ctrl_key.sign(&cert.signed_part()).to_bytes();
    cert
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VendorHello {
    pub dh_pub: [u8; 32],
    pub signature: [u8; 64],
}

impl VendorHello {
    pub const FIELDS: [(&'static str, Range<usize>); 2] = [("dh_pub", 0..32), ("signature", 32..96)];

    fn signed_part(nonce: &[u8; NONCE_LEN], ctrl_dh: &[u8; 32], vendor_dh: &[u8; 32]) -> Vec<u8> {
        [HELLO_DOMAIN, nonce, ctrl_dh, vendor_dh].concat()
    }

    pub fn encode(&self) -> Vec<u8> {
        [&self.dh_pub[..], &self.signature].concat()
    }

    pub fn decode(b: &[u8]) -> Result<Self, AttestError> {
        if b.len() != HELLO_LEN {
            return Err(AttestError::Malformed("vendor hello"));
        }
        Ok(Self {
            dh_pub: b[..32].try_into().unwrap(),
            signature: b[32..].try_into().unwrap(),
        })
    }
}

/// Symmetric key of the provisioning channel.
#[derive(Clone, PartialEq, Eq)]
pub struct ChannelKey([u8; 32]);

impl ChannelKey {
    pub fn expose_secret(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for ChannelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ChannelKey(<redacted>)")
    }
}

fn derive_channel(
    shared: &[u8; 32],
    nonce: &[u8; NONCE_LEN],
    ctrl_pub: &[u8; 32],
    vendor_pub: &[u8; 32],
) -> ChannelKey {
    let hk = Hkdf::<Sha384>::new(Some(nonce), shared);
    let mut okm = [0u8; 32];
    hk.expand_multi_info(&[CHANNEL_INFO, ctrl_pub, vendor_pub], &mut okm)
        .expect("32 bytes is a valid HKDF length");
    ChannelKey(okm)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSecret {
    pub session: SessionId,
    pub peer: DeviceId,
    pub key: SessionKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvisioningBundle {
    pub bitstream: Vec<u8>,
    pub secrets: Vec<SessionSecret>,
    pub config: String,
}

impl ProvisioningBundle {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.bitstream.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.bitstream);
        out.extend_from_slice(&(self.secrets.len() as u32).to_be_bytes());
        for s in &self.secrets {
            out.extend_from_slice(&s.session.0.to_be_bytes());
            out.extend_from_slice(&s.peer.0.to_be_bytes());
            out.extend_from_slice(s.key.expose_secret());
        }
        out.extend_from_slice(&(self.config.len() as u32).to_be_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn decode(mut b: &[u8]) -> Result<Self, AttestError> {
        let mut take = |n: usize| -> Result<&[u8], AttestError> {
            if b.len() < n {
                return Err(AttestError::Malformed("provisioning bundle"));
            }
            let (h, t) = b.split_at(n);
            b = t;
            Ok(h)
        };
        let n = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let bitstream = take(n)?.to_vec();
        let count = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut secrets = Vec::with_capacity(count.min(256));
        for _ in 0..count {
            let session = SessionId(u32::from_be_bytes(take(4)?.try_into().unwrap()));
            let peer = DeviceId(u32::from_be_bytes(take(4)?.try_into().unwrap()));
            let key = SessionKey::new(take(KEY_LEN)?.try_into().unwrap());
            secrets.push(SessionSecret { session, peer, key });
        }
        let n = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let config = String::from_utf8(take(n)?.to_vec()).map_err(|_| AttestError::Malformed("provisioning bundle"))?;
        if !b.is_empty() {
            return Err(AttestError::Malformed("provisioning bundle"));
        }
        Ok(Self {
            bitstream,
            secrets,
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBundle {
    pub nonce: [u8; AEAD_NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl SealedBundle {
    pub fn encode(&self) -> Vec<u8> {
        [&self.nonce[..], &self.ciphertext].concat()
    }

    pub fn decode(b: &[u8]) -> Result<Self, AttestError> {
        if b.len() < AEAD_NONCE_LEN {
            return Err(AttestError::Malformed("sealed bundle"));
        }
        Ok(Self {
            nonce: b[..AEAD_NONCE_LEN].try_into().unwrap(),
            ciphertext: b[AEAD_NONCE_LEN..].to_vec(),
        })
    }

    pub fn fields(len: usize) -> [(&'static str, Range<usize>); 2] {
        [("aead_nonce", 0..AEAD_NONCE_LEN), ("ciphertext", AEAD_NONCE_LEN..len)]
    }
}

/// Opens `sealed` and provisions `ep` from it. Nothing is installed unless
/// the ciphertext authenticates.
pub fn provision(channel: &ChannelKey, sealed: &SealedBundle, ep: &mut Endpoint) -> Result<[u8; DIGEST_LEN], AttestError> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&channel.0));
    let plain = cipher
        .decrypt(
            Nonce::from_slice(&sealed.nonce),
            Payload {
                msg: &sealed.ciphertext,
                aad: BUNDLE_AAD,
            },
        )
        .map_err(|_| AttestError::ChannelAuthFailure)?;
    let bundle = ProvisioningBundle::decode(&plain)?;
    let measurement = measure(&bundle.bitstream);
    let specs = bundle
        .secrets
        .into_iter()
        .map(|s| SessionSpec {
            session: s.session,
            peer: s.peer,
            key: s.key,
        })
        .collect();
    ep.install_provisioned(specs, measurement)?;
    Ok(measurement)
}

pub struct Controller {
    identity: DeviceIdentity,
    vendor_pub: VerifyingKey,
    pending: Option<([u8; NONCE_LEN], [u8; 32])>,
    channel: Option<ChannelKey>,
}

impl Controller {
    /// `vendor_pub` is embedded in the controller binary.
    pub fn new(identity: DeviceIdentity, vendor_pub: VerifyingKey) -> Self {
        Self {
            identity,
            vendor_pub,
            pending: None,
            channel: None,
        }
    }

    pub fn identity(&self) -> &DeviceIdentity {
        &self.identity
    }

    pub fn respond(&mut self, nonce: [u8; NONCE_LEN]) -> AttestationCert {
        let cert = controller_respond(&self.identity, nonce);
        self.pending = Some((nonce, cert.dh_pub));
        cert
    }

    pub fn finish(&mut self, hello: &VendorHello) -> Result<ChannelKey, AttestError> {
        let (nonce, ctrl_dh) = self.pending.ok_or(AttestError::OutOfOrder)?;
        let sig = Signature::from_bytes(&hello.signature);
        self.vendor_pub
            .verify_strict(&VendorHello::signed_part(&nonce, &ctrl_dh, &hello.dh_pub), &sig)
            .map_err(|_| AttestError::BadVendorSignature)?;
        let shared = self
            .identity
            .dh_secret(&nonce)
            .diffie_hellman(&PublicKey::from(hello.dh_pub));
        let key = derive_channel(
            shared.as_bytes(),
            &nonce,
            self.identity.ctrl_public().as_bytes(),
            self.vendor_pub.as_bytes(),
        );
        self.channel = Some(key.clone());
        Ok(key)
    }

    /// The channel key derived by `finish`, if any.
    pub fn channel_key(&self) -> Option<&ChannelKey> {
        self.channel.as_ref()
    }

    pub fn install(&mut self, sealed: &SealedBundle, ep: &mut Endpoint) -> Result<[u8; DIGEST_LEN], AttestError> {
        let channel = self.channel.as_ref().ok_or(AttestError::OutOfOrder)?;
        provision(channel, sealed, ep)
    }
}

pub struct Vendor {
    signing: SigningKey,
    device_hw_pub: VerifyingKey,
    expected_digest: [u8; DIGEST_LEN],
    rng: ChaCha8Rng,
    outstanding: Option<[u8; NONCE_LEN]>,
    channel: Option<ChannelKey>,
}

impl Vendor {
    pub fn new(seed: u64, signing_seed: [u8; 32], device_hw_pub: VerifyingKey, expected_digest: [u8; DIGEST_LEN]) -> Self {
        Self {
            signing: SigningKey::from_bytes(&signing_seed),
            device_hw_pub,
            expected_digest,
            rng: ChaCha8Rng::seed_from_u64(seed),
            outstanding: None,
            channel: None,
        }
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn begin(&mut self) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        self.rng.fill_bytes(&mut n);
        self.outstanding = Some(n);
        self.channel = None;
        n
    }

    /// Checks the certificate chain and answers with a signed DH share.
    /// The outstanding nonce is consumed whatever the outcome.
    pub fn verify(&mut self, cert: &AttestationCert) -> Result<(VendorHello, ChannelKey), AttestError> {
        let outstanding = self.outstanding.take();
        let ctrl_pub = VerifyingKey::from_bytes(&cert.ctrl_pub).map_err(|_| AttestError::BadDeviceSignature)?;
        self.device_hw_pub
            .verify_strict(
                &cert_body(&cert.ctrl_bin_digest, &cert.ctrl_pub),
                &Signature::from_bytes(&cert.ctrl_bin_cert),
            )
            .map_err(|_| AttestError::BadDeviceSignature)?;
        if cert.ctrl_bin_digest != self.expected_digest {
            return Err(AttestError::MeasurementMismatch);
        }
        if outstanding != Some(cert.nonce) {
            return Err(AttestError::StaleNonce);
        }
        ctrl_pub
            .verify_strict(&cert.signed_part(), &Signature::from_bytes(&cert.signature))
            .map_err(|_| AttestError::BadControllerSignature)?;

        let mut eph = [0u8; 32];
        self.rng.fill_bytes(&mut eph);
        let eph = StaticSecret::from(eph);
        let dh_pub = PublicKey::from(&eph).to_bytes();
        let signature = self
            .signing
            .sign(&VendorHello::signed_part(&cert.nonce, &cert.dh_pub, &dh_pub))
            .to_bytes();
        let shared = eph.diffie_hellman(&PublicKey::from(cert.dh_pub));
        let key = derive_channel(shared.as_bytes(), &cert.nonce, &cert.ctrl_pub, self.signing.verifying_key().as_bytes());
        self.channel = Some(key.clone());
        Ok((VendorHello { dh_pub, signature }, key))
    }

    pub fn seal(&mut self, bundle: &ProvisioningBundle) -> Result<SealedBundle, AttestError> {
        let channel = self.channel.as_ref().ok_or(AttestError::OutOfOrder)?;
        let mut nonce = [0u8; AEAD_NONCE_LEN];
        self.rng.fill_bytes(&mut nonce);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&channel.0));
        let ciphertext = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: &bundle.encode(),
                    aad: BUNDLE_AAD,
                },
            )
            .expect("encryption of an in-memory buffer cannot fail");
        Ok(SealedBundle { nonce, ciphertext })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MsgType {
    Nonce = 1,
    Cert = 2,
    VendorHello = 3,
    Sealed = 4,
}

impl MsgType {
    pub const ALL: [MsgType; 4] = [Self::Nonce, Self::Cert, Self::VendorHello, Self::Sealed];

    pub fn fields(self, len: usize) -> Vec<(&'static str, Range<usize>)> {
        match self {
            Self::Nonce => vec![("nonce", 0..NONCE_LEN)],
            Self::Cert => AttestationCert::FIELDS.to_vec(),
            Self::VendorHello => VendorHello::FIELDS.to_vec(),
            Self::Sealed => SealedBundle::fields(len).to_vec(),
        }
    }
}

/// Everything a passive wiretap sees. Encoded as `type u8 | len u32 | bytes`
/// per message.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<(MsgType, Vec<u8>)>,
}

impl Transcript {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (t, m) in &self.messages {
            out.push(*t as u8);
            out.extend_from_slice(&(m.len() as u32).to_be_bytes());
            out.extend_from_slice(m);
        }
        out
    }

    /// True if `secret` occurs anywhere in the encoded transcript.
    pub fn contains(&self, secret: &[u8]) -> bool {
        !secret.is_empty() && self.to_bytes().windows(secret.len()).any(|w| w == secret)
    }
}

/// Runs the full handshake. Every message passes through `wire`, which may
/// rewrite it in flight, before the recipient decodes it.
pub fn run_handshake_with(
    controller: &mut Controller,
    vendor: &mut Vendor,
    bundle: &ProvisioningBundle,
    ep: &mut Endpoint,
    mut wire: impl FnMut(MsgType, &mut Vec<u8>),
) -> (Transcript, Result<[u8; DIGEST_LEN], AttestError>) {
    let mut t = Transcript::default();
    let mut send = |ty: MsgType, mut bytes: Vec<u8>, t: &mut Transcript| {
        wire(ty, &mut bytes);
        t.messages.push((ty, bytes.clone()));
        bytes
    };
    let result = (|| {
        let nonce = send(MsgType::Nonce, vendor.begin().to_vec(), &mut t);
        let nonce: [u8; NONCE_LEN] = nonce.try_into().map_err(|_| AttestError::Malformed("nonce"))?;
        let cert = send(MsgType::Cert, controller.respond(nonce).encode(), &mut t);
        let (hello, _) = vendor.verify(&AttestationCert::decode(&cert)?)?;
        let hello = send(MsgType::VendorHello, hello.encode(), &mut t);
        controller.finish(&VendorHello::decode(&hello)?)?;
        let sealed = send(MsgType::Sealed, vendor.seal(bundle)?.encode(), &mut t);
        controller.install(&SealedBundle::decode(&sealed)?, ep)
    })();
    (t, result)
}

pub fn run_handshake(
    controller: &mut Controller,
    vendor: &mut Vendor,
    bundle: &ProvisioningBundle,
    ep: &mut Endpoint,
) -> (Transcript, Result<[u8; DIGEST_LEN], AttestError>) {
    run_handshake_with(controller, vendor, bundle, ep, |_, _| {})
}

/// A complete, seeded handshake for one device with `sessions` provisioned
/// session keys. Everything is derived from `seed`.
pub struct Demo {
    pub transcript: Transcript,
    pub outcome: Result<[u8; DIGEST_LEN], AttestError>,
    pub endpoint: Endpoint,
    pub bundle: ProvisioningBundle,
    /// Every secret the run handled: session keys, the channel key, the
    /// device and controller signing seeds.
    pub secrets: Vec<Vec<u8>>,
}

impl Demo {
    /// Human-readable transcript, one line per message, hex encoded.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (ty, bytes) in &self.transcript.messages {
            out.push_str(&format!("{ty:?} {} {}\n", bytes.len(), hex::encode(bytes)));
        }
        match &self.outcome {
            Ok(m) => out.push_str(&format!("provisioned measurement {}\n", hex::encode(m))),
            Err(e) => out.push_str(&format!("failed: {e}\n")),
        }
        out
    }
}

pub const DEMO_CTRL_BIN: &[u8] = b"tnic controller firmware";
pub const DEMO_BITSTREAM: &[u8] = b"tnic attestation kernel bitstream";

pub fn demo(seed: u64, sessions: u32) -> Result<Demo, DeviceError> {
    // the vendor's nonce stream is seeded with `seed`; keep secrets off it
    let mut rng = ChaCha8Rng::seed_from_u64(!seed);
    let mut draw = || {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        b
    };
    let (hw, ctrl, vendor_sign) = (draw(), draw(), draw());
    let id = DeviceIdentity::manufacture(hw, ctrl, DEMO_CTRL_BIN);
    let mut vendor = Vendor::new(seed, vendor_sign, id.hw_public(), measure(DEMO_CTRL_BIN));
    let mut controller = Controller::new(id, vendor.public_key());
    let secrets: Vec<SessionSecret> = (0..sessions)
        .map(|i| SessionSecret {
            session: SessionId(i + 1),
            peer: DeviceId(2),
            key: SessionKey::new(draw()),
        })
        .collect();
    let bundle = ProvisioningBundle {
        bitstream: DEMO_BITSTREAM.to_vec(),
        secrets,
        config: format!("demo seed {seed}"),
    };
    let (tx, _rx) = std::sync::mpsc::channel();
    let mut endpoint = Endpoint::connect(
        crate::device::DeviceConfig::new(DeviceId(1)),
        &crate::device::NetHandle::new(tx, [DeviceId(2)]),
    )?;
    let (transcript, outcome) = run_handshake(&mut controller, &mut vendor, &bundle, &mut endpoint);
    let mut leaked: Vec<Vec<u8>> = bundle.secrets.iter().map(|s| s.key.expose_secret().to_vec()).collect();
    if let Some(k) = controller.channel_key() {
        leaked.push(k.expose_secret().to_vec());
    }
    leaked.push(hw.to_vec());
    leaked.push(ctrl.to_vec());
    leaked.push(vendor_sign.to_vec());
    Ok(Demo {
        transcript,
        outcome,
        endpoint,
        bundle,
        secrets: leaked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceConfig, NetHandle};
    use std::sync::mpsc;

    const CTRL_BIN: &[u8] = b"controller firmware v1";

    fn setup() -> (Controller, Vendor, Endpoint, ProvisioningBundle, mpsc::Receiver<crate::device::Outgoing>) {
        let id = DeviceIdentity::manufacture([1; 32], [2; 32], CTRL_BIN);
        let vendor = Vendor::new(7, [3; 32], id.hw_public(), measure(CTRL_BIN));
        let ctrl = Controller::new(id, vendor.public_key());
        let (tx, rx) = mpsc::channel();
        let ep = Endpoint::connect(DeviceConfig::new(DeviceId(1)), &NetHandle::new(tx, [DeviceId(2)])).unwrap();
        let bundle = ProvisioningBundle {
            bitstream: b"tnic bitstream".to_vec(),
            secrets: vec![SessionSecret {
                session: SessionId(10),
                peer: DeviceId(2),
                key: SessionKey::new([0x5a; 32]),
            }],
            config: "n=2".into(),
        };
        (ctrl, vendor, ep, bundle, rx)
    }

    #[test]
    fn demo_is_deterministic_and_leak_free() {
        let a = demo(9, 2).unwrap();
        let b = demo(9, 2).unwrap();
        assert!(a.outcome.is_ok());
        assert_eq!(a.render(), b.render());
        assert_ne!(a.render(), demo(10, 2).unwrap().render());
        assert_eq!(a.secrets.len(), 6);
        for s in &a.secrets {
            assert!(!a.transcript.contains(s), "{}", hex::encode(s));
        }
    }

    #[test]
    fn nonces_are_fresh_and_reproducible() {
        let (_, mut v, ..) = setup();
        let (a, b) = (v.begin(), v.begin());
        assert_ne!(a, b);
        let (_, mut v2, ..) = setup();
        assert_eq!(v2.begin(), a);
    }

    #[test]
    fn cert_is_deterministic() {
        let id = DeviceIdentity::manufacture([1; 32], [2; 32], CTRL_BIN);
        assert_eq!(controller_respond(&id, [9; 32]), controller_respond(&id, [9; 32]));
    }

    #[test]
    fn honest_handshake_provisions_and_agrees_on_channel() {
        let (mut c, mut v, mut ep, bundle, _rx) = setup();
        let n = v.begin();
        let cert = c.respond(n);
        let (hello, vk) = v.verify(&cert).unwrap();
        let ck = c.finish(&hello).unwrap();
        assert_eq!(vk, ck);
        let sealed = v.seal(&bundle).unwrap();
        c.install(&sealed, &mut ep).unwrap();
        assert!(ep.is_frozen());
        assert_eq!(ep.peer(SessionId(10)), Some(DeviceId(2)));
        assert_eq!(ep.bitstream_measurement(), Some(&measure(b"tnic bitstream")));
    }

    #[test]
    fn wrong_measurement_rejected() {
        let id = DeviceIdentity::manufacture([1; 32], [2; 32], b"patched firmware");
        let mut v = Vendor::new(1, [3; 32], id.hw_public(), measure(CTRL_BIN));
        let n = v.begin();
        assert_eq!(v.verify(&controller_respond(&id, n)).unwrap_err(), AttestError::MeasurementMismatch);
    }

    #[test]
    fn substituted_ctrl_pub_rejected() {
        let (mut c, mut v, ..) = setup();
        let n = v.begin();
        let mut cert = c.respond(n);
        let rogue = SigningKey::from_bytes(&[8; 32]);
        cert.ctrl_pub = rogue.verifying_key().to_bytes();
        cert.signature = rogue.sign(&cert.signed_part()).to_bytes();
        assert_eq!(v.verify(&cert).unwrap_err(), AttestError::BadDeviceSignature);
    }

    #[test]
    fn replayed_cert_is_stale() {
        let (mut c, mut v, ..) = setup();
        let n = v.begin();
        let cert = c.respond(n);
        v.verify(&cert).unwrap();
        v.begin();
        assert_eq!(v.verify(&cert).unwrap_err(), AttestError::StaleNonce);
    }

    #[test]
    fn tampered_ciphertext_installs_nothing() {
        let (mut c, mut v, mut ep, bundle, _rx) = setup();
        let (_, r) = run_handshake_with(&mut c, &mut v, &bundle, &mut ep, |t, b| {
            if t == MsgType::Sealed {
                let last = b.len() - 1;
                b[last] ^= 1;
            }
        });
        assert_eq!(r.unwrap_err(), AttestError::ChannelAuthFailure);
        assert!(!ep.is_frozen());
        assert_eq!(ep.kernel().sessions().count(), 0);
    }

    #[test]
    fn bundle_codec_round_trip() {
        let (.., bundle, _rx) = setup();
        assert_eq!(ProvisioningBundle::decode(&bundle.encode()).unwrap(), bundle);
        assert!(ProvisioningBundle::decode(&bundle.encode()[1..]).is_err());
    }
}
