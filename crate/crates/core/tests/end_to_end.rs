use std::time::Duration;

use keyweave::channels::{ChannelDescriptor, ChannelNetwork, ChannelSet, MediumType};
use keyweave::client::{ClientConfig, ClientMode, ClientNode, KeyParams, RedirectRules, Target};
use keyweave::keycore::EncryptionMode;
use keyweave::proxy::{ProxyConfig, ProxyNode};
use keyweave::testbed::{recipient_keypair, same_params, KemChoice, Testbed, TestbedSpec};
use keyweave::wire::AckStatus;

const MEDIA: [MediumType; 3] = [MediumType::WiFi, MediumType::Bluetooth, MediumType::Nfc];

async fn establish_once(spec: TestbedSpec, mode: ClientMode, params: KeyParams) {
    let bed = Testbed::launch(&spec).await.unwrap();
    let est = bed.establish(0, 1, [&params, &params], mode).await.unwrap();
    assert_eq!(est.recovered[0], est.issued);
    assert_eq!(est.recovered[1], est.issued);
    assert_eq!(est.issued.bits(), params.key_bits);
    assert!(est.report.outcome.is_ok());
    assert_eq!(bed.qkms.live_keys(), 0);
    bed.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn direct_classical() {
    let spec = TestbedSpec::pair(MEDIA.to_vec(), false, 1);
    establish_once(spec, ClientMode::ClassicalMultipath, same_params("direct", 256, 8, true)).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn direct_envelope() {
    let spec = TestbedSpec::pair(MEDIA.to_vec(), false, 2);
    let mut params = same_params("envelope", 128, 16, true);
    params.encryption = EncryptionMode::Envelope;
    establish_once(spec, ClientMode::ClassicalMultipath, params).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn direct_pq_stub_and_mlkem() {
    for (kem, seed) in [(KemChoice::Stub, 3), (KemChoice::MlKem768, 4)] {
        let mut spec = TestbedSpec::pair(MEDIA.to_vec(), false, seed);
        spec.kem = kem;
        establish_once(spec, ClientMode::PqTunnel, same_params("pq", 256, 4, false)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn via_explicit_proxies() {
    let spec = TestbedSpec::pair(MEDIA.to_vec(), true, 5);
    establish_once(spec, ClientMode::ClassicalMultipath, same_params("proxied", 256, 6, true)).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn via_proxies_with_tunnels_on_both_legs() {
    let mut spec = TestbedSpec::pair(MEDIA.to_vec(), true, 6);
    spec.kem = KemChoice::Stub;
    spec.proxy_upstream_tunnel = true;
    establish_once(spec, ClientMode::PqTunnel, same_params("pq-proxied", 128, 5, true)).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn proxy_timings_are_recorded() {
    let spec = TestbedSpec::pair(MEDIA.to_vec(), true, 7);
    let bed = Testbed::launch(&spec).await.unwrap();
    let params = same_params("timed", 256, 8, true);
    let est = bed
        .establish(0, 1, [&params, &params], ClientMode::ClassicalMultipath)
        .await
        .unwrap();
    for t in &est.proxy_timing {
        let t = t.expect("proxy saw the session");
        assert_eq!(t.relayed, 8);
        assert!(t.network() > Duration::ZERO);
    }
    for t in &est.client_timing {
        assert!(t.decryption > Duration::ZERO);
        assert!(t.wall >= t.network + t.decryption + t.reconstruction);
    }
    bed.shutdown().await;
}

/// A redirect rule at the client's network boundary sends the request for
/// the server to the proxy instead; the client code path is unchanged.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn transparent_and_explicit_deliver_the_same_way() {
    let spec = TestbedSpec::pair(MEDIA.to_vec(), true, 8);
    let bed = Testbed::launch(&spec).await.unwrap();
    let qkms = bed.qkms_url().to_owned();
    for (i, party) in bed.parties.iter().enumerate() {
        let proxy = party.proxy.as_ref().unwrap().base_url();
        if i == 0 {
            party
                .client
                .set_redirects(RedirectRules::default().redirect(qkms.clone(), proxy));
        }
    }
    let params = same_params("transparent", 256, 4, true);
    let alice = &bed.parties[0];
    let bob = &bed.parties[1];
    let (ta, tb) = (Target::Qkms(qkms.clone()), bob.target(&qkms));
    let (ra, rb) = tokio::join!(
        alice.client.request_key(&params, &ta, ClientMode::ClassicalMultipath),
        bob.client.request_key(&params, &tb, ClientMode::ClassicalMultipath),
    );
    let (ra, rb) = (ra.unwrap(), rb.unwrap());
    assert_eq!(ra.contacted, alice.proxy.as_ref().unwrap().base_url());
    assert_eq!(rb.contacted, bob.proxy.as_ref().unwrap().base_url());
    let ka = alice.client.wait("transparent").await.unwrap();
    let kb = bob.client.wait("transparent").await.unwrap();
    assert_eq!(ka, kb);

    // Both proxies forwarded requests carrying their own channels only.
    for party in &bed.parties {
        let proxy = party.proxy.as_ref().unwrap();
        let up = proxy.upstream_requests();
        assert_eq!(up.len(), 1);
        assert_eq!(&up[0].channels, proxy.own_channels());
    }
    bed.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn mismatched_tagnames_never_issue() {
    let spec = TestbedSpec::pair(MEDIA.to_vec(), false, 9);
    let bed = Testbed::launch(&spec).await.unwrap();
    let qkms = Target::Qkms(bed.qkms_url().to_owned());
    let a = bed.parties[0]
        .client
        .request_key(&same_params("left", 256, 2, true), &qkms, ClientMode::ClassicalMultipath)
        .await
        .unwrap();
    let b = bed.parties[1]
        .client
        .request_key(&same_params("right", 256, 2, true), &qkms, ClientMode::ClassicalMultipath)
        .await
        .unwrap();
    assert_eq!(a.ack.status, AckStatus::Waiting);
    assert_eq!(b.ack.status, AckStatus::Waiting);
    assert_eq!(bed.qkms.issued_keys(), 0);
    assert!(bed.network.taps().is_empty());
    bed.shutdown().await;
}

/// Three proxies form a pool; each client enters at a random member and
/// fragments come back along the reverse path.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn through_an_http_pool() {
    let network = ChannelNetwork::new(11);
    let qkms = keyweave::qkms::Qkms::new(Default::default(), network.clone());
    let service = qkms
        .serve(keyweave::net::bind("127.0.0.1:0").await.unwrap())
        .unwrap();
    let mut pool = Vec::new();
    for i in 0..3 {
        let own = ChannelSet::new(vec![
            ChannelDescriptor::local(format!("pool{i}-wifi"), MediumType::WiFi),
            ChannelDescriptor::local(format!("pool{i}-eth"), MediumType::Ethernet),
        ])
        .unwrap();
        let mut cfg = ProxyConfig::new(service.base_url(), own);
        cfg.forward_probability = 0.7;
        cfg.max_hops = 4;
        cfg.seed = Some(100 + i);
        pool.push(ProxyNode::start(cfg, &network).await.unwrap());
    }
    let urls: Vec<String> = pool.iter().map(|p| p.base_url()).collect();
    for p in &pool {
        p.set_pool_peers(urls.clone());
    }

    let mut clients = Vec::new();
    for (i, label) in ["alice", "bob"].iter().enumerate() {
        let mut cfg = ClientConfig::new(*label);
        cfg.seed = Some(i as u64);
        clients.push(ClientNode::start(cfg, recipient_keypair(i as u64), &network).await.unwrap());
    }
    for round in 0..5 {
        let tag = format!("pool-{round}");
        let params = same_params(&tag, 256, 6, true);
        let target = Target::Pool(urls.clone());
        let (ra, rb) = tokio::join!(
            clients[0].request_key(&params, &target, ClientMode::ClassicalMultipath),
            clients[1].request_key(&params, &target, ClientMode::ClassicalMultipath),
        );
        ra.unwrap();
        rb.unwrap();
        let ka = clients[0].wait(&tag).await.unwrap();
        let kb = clients[1].wait(&tag).await.unwrap();
        assert_eq!(ka, kb);
    }
    let pq = clients[0]
        .request_key(&same_params("nope", 256, 2, true), &Target::Pool(urls), ClientMode::PqTunnel)
        .await;
    assert!(pq.is_err());
    for c in &clients {
        c.shutdown().await;
    }
    for p in &pool {
        p.shutdown().await;
    }
    service.shutdown().await;
}
