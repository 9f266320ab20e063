use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::json;

use glasspipe_core::bus::tcp::{BusClient, BusServer};
use glasspipe_core::bus::{AckOutcome, Broker, BrokerConfig, Envelope, SubscriptionSpec};
use glasspipe_core::clock::SystemClock;
use glasspipe_core::scheduler::{ResourcePool, Scheduler, SchedulerConfig, SchedulerService, StubExecutor, Task};

fn server(broker: Broker) -> std::net::SocketAddr {
    let (addr, _handle) = BusServer::bind("127.0.0.1:0", broker).unwrap().spawn().unwrap();
    addr
}

fn recv(client: &BusClient) -> glasspipe_core::bus::Delivery {
    client
        .recv_timeout(Duration::from_secs(5))
        .unwrap()
        .expect("delivery within 5 s")
}

#[test]
fn publish_subscribe_ack_over_tcp() {
    let addr = server(Broker::in_memory());
    let mut sub = BusClient::connect(addr).unwrap();
    sub.subscribe(SubscriptionSpec::transient("gaze.*")).unwrap();
    let mut publ = BusClient::connect(addr).unwrap();
    for i in 0..5 {
        let r = publ
            .publish(Envelope::new("gaze.dev1", "gaze", "dev1", json!({ "seq": i })))
            .unwrap();
        assert_eq!(r.msg_id, format!("gaze.dev1:{i}"));
    }
    publ.publish(Envelope::new("task.done.x", "t", "x", json!(null))).unwrap();
    for i in 0..5 {
        let d = recv(&sub);
        assert_eq!(d.envelope.payload["seq"], i);
        assert_eq!(sub.ack(&d.envelope.msg_id).unwrap(), AckOutcome::Acked);
    }
    assert!(sub.recv_timeout(Duration::from_millis(200)).unwrap().is_none());
    assert_eq!(sub.ack("gaze.dev1:0").unwrap(), AckOutcome::Unknown);
    assert_eq!(publ.replay("gaze.dev1", 3).unwrap().len(), 2);
}

#[test]
fn nack_redelivers_over_tcp() {
    let addr = server(Broker::in_memory());
    let mut c = BusClient::connect(addr).unwrap();
    c.subscribe(SubscriptionSpec::transient("a.#")).unwrap();
    c.publish(Envelope::new("a.b", "x", "g", json!(1))).unwrap();
    let first = recv(&c);
    assert!(!first.redelivered);
    assert_eq!(c.nack(&first.envelope.msg_id).unwrap(), AckOutcome::Requeued);
    let again = recv(&c);
    assert_eq!(again.envelope.msg_id, first.envelope.msg_id);
    assert!(again.redelivered);
    assert_eq!(again.delivery_count, 2);
}

#[test]
fn errors_are_reported_to_the_client() {
    let addr = server(Broker::in_memory());
    let mut c = BusClient::connect(addr).unwrap();
    assert!(c.publish(Envelope::new("bad..topic", "x", "g", json!(1))).is_err());
    assert!(c.subscribe(SubscriptionSpec::transient("a.#.b.#x")).is_err());
    // the connection survives errors
    assert!(c.publish(Envelope::new("ok", "x", "g", json!(1))).is_ok());
}

#[test]
fn durable_subscription_resumes_after_client_reconnect() {
    let dir = tempfile::tempdir().unwrap();
    let broker = Broker::open(BrokerConfig::durable(dir.path()), Arc::new(SystemClock)).unwrap();
    let addr = server(broker.clone());
    let mut publ = BusClient::connect(addr).unwrap();
    for i in 0..4 {
        publ.publish(Envelope::new("task.submit.g", "open_url", "g", json!(i))).unwrap();
    }
    {
        let mut c = BusClient::connect(addr).unwrap();
        c.subscribe(SubscriptionSpec::durable("w", "task.submit.#")).unwrap();
        let d = recv(&c);
        c.ack(&d.envelope.msg_id).unwrap();
        // second delivery arrives but the client goes away before acking
        recv(&c);
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    let mut c = loop {
        let mut c = BusClient::connect(addr).unwrap();
        match c.subscribe(SubscriptionSpec::durable("w", "task.submit.#")) {
            Ok(()) => break c,
            // the server may not have noticed the old connection closing yet
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("{e}"),
        }
    };
    let payloads: Vec<i64> = (0..3)
        .map(|_| {
            let d = recv(&c);
            c.ack(&d.envelope.msg_id).unwrap();
            d.envelope.payload.as_i64().unwrap()
        })
        .collect();
    assert_eq!(payloads, [1, 2, 3]);
}

#[test]
fn scheduler_service_runs_over_the_wire() {
    let addr = server(Broker::in_memory());
    let mut source = BusClient::connect(addr).unwrap();
    source.subscribe(SubscriptionSpec::durable("scheduler", "task.submit.#")).unwrap();
    let sink = BusClient::connect(addr).unwrap();
    let mut done = BusClient::connect(addr).unwrap();
    done.subscribe(SubscriptionSpec::transient("task.done.*")).unwrap();

    let pool: ResourcePool = "cpu=2".parse().unwrap();
    let mut svc = SchedulerService::new(
        Scheduler::new(pool, SchedulerConfig::default()),
        Box::new(StubExecutor::default()),
        source,
        sink,
    );
    let mut publ = BusClient::connect(addr).unwrap();
    let url = "https://www.google.com/maps/search/?api=1&query=NCHC";
    let tasks = [
        Task::new("nav", "open_url", 0.0).with_payload(json!({ "url": url })),
        Task::new("cam", "launch_app", 0.0).with_payload(json!({ "app": "camera" })),
        Task::new("huge", "launch_app", 0.0).with_resource("cpu", 9.0),
    ];
    for t in &tasks {
        publ.publish(Envelope::new(
            format!("task.submit.{}", t.group),
            t.task_type.as_str(),
            t.group.clone(),
            serde_json::to_value(t).unwrap(),
        ))
        .unwrap();
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while svc.effects().len() + (svc.scheduler().stats().rejected as usize) < 3 {
        assert!(Instant::now() < deadline, "service did not finish");
        svc.intake(0.0).unwrap();
        svc.dispatch(0.0).unwrap();
        std::thread::sleep(Duration::from_millis(10));
    }
    let effects = svc.effects();
    assert_eq!(effects.len(), 2);
    assert!(effects.iter().any(|e| e.effect_type == "open_url" && e.details["url"] == url));
    let mut statuses: Vec<String> = (0..3)
        .map(|_| {
            let d = recv(&done);
            done.ack(&d.envelope.msg_id).unwrap();
            d.envelope.payload["status"].as_str().unwrap().to_string()
        })
        .collect();
    statuses.sort();
    assert_eq!(statuses, ["done", "done", "rejected"]);
}
