use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use cardioloop::dosing::{Prescription, SafetyGate};
use cardioloop::pathway::PathwayConfig;
use cardioloop::pump::{
    serve, AllowAll, Device, DeviceConfig, DoseAuthorizer, GateAuthorizer, GatewayState, PumpClient, PumpGeometry,
    ServerHandle, ServiceConfig,
};
use cardioloop::time::{LocalOffset, SimClock};

pub struct Rig {
    pub server: ServerHandle,
    pub device: Arc<Device>,
    pub gateway: Arc<GatewayState>,
    pub clock: SimClock,
}

impl Rig {
    pub fn addr(&self) -> SocketAddr {
        self.server.local_addr()
    }
}

/// Service on an ephemeral port, optionally behind the canonical prescription.
pub fn start_rig(with_gate: bool, cfg: DeviceConfig) -> Rig {
    let clock = SimClock::simulated(1_700_000_000);
    let gate = with_gate
        .then(|| Arc::new(SafetyGate::new(Prescription::canonical(), LocalOffset::UTC, clock.now()).unwrap()));
    let auth: Arc<dyn DoseAuthorizer> = match &gate {
        Some(g) => Arc::new(GateAuthorizer { gate: g.clone(), clock: clock.clone() }),
        None => Arc::new(AllowAll),
    };
    let device = Arc::new(Device::new(PumpGeometry::default(), cfg, auth).unwrap());
    let gateway =
        Arc::new(GatewayState::new("p1", LocalOffset::UTC, clock.clone(), gate, PathwayConfig::default()));
    let server = serve("127.0.0.1:0", device.clone(), gateway.clone(), ServiceConfig::default()).unwrap();
    Rig { server, device, gateway, clock }
}

/// Concurrent clients each sending STATUS frames; returns every reported latency.
pub fn status_storm(addr: SocketAddr, clients: usize, per_client: usize) -> Vec<f64> {
    let handles: Vec<_> = (0..clients)
        .map(|c| {
            thread::spawn(move || {
                let mut client = PumpClient::connect(addr).unwrap();
                (0..per_client)
                    .map(|k| {
                        let id = format!("s{c}-{k}");
                        let line = format!(r#"{{"id":"{id}","cmd":"STATUS"}}"#);
                        let v: serde_json::Value = serde_json::from_str(&client.send_line(&line).unwrap()).unwrap();
                        assert_eq!(v["id"], id.as_str());
                        v["latency_ms"].as_f64().unwrap()
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
}

pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Random byte soup, truncated frames and wrong types.
pub fn malformed_lines(n: usize, seed: u64) -> Vec<Vec<u8>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let templates = [
        r#"{"id":"a","cmd":"DELIVER","volume_ml":"lots"}"#,
        r#"{"id":5,"cmd":"STATUS"}"#,
        r#"{"cmd":"STATUS"}"#,
        r#"[1,2,3]"#,
        r#"{"id":"b","cmd":"CONFIG","geometry":{"steps_per_rev":-1}}"#,
        r#"{"id":"c","cmd":"DELIVER","volume_ml":1e308}"#,
        r#"{"id":"d","cmd":"DELIVER","volume_ml":-0.0}"#,
        r#"{"id":"e","op":"nope"}"#,
        r#"{"id":"f","op":"manual_dose","ml":"x"}"#,
        r#"null"#,
    ];
    (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => (0..rng.random_range(1..200)).map(|_| rng.random::<u8>()).filter(|b| *b != b'\n').collect(),
            1 => {
                let t = templates[rng.random_range(0..templates.len())].as_bytes();
                t[..rng.random_range(0..t.len())].to_vec()
            }
            _ => templates[rng.random_range(0..templates.len())].as_bytes().to_vec(),
        })
        .collect()
}
