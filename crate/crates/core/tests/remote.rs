use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use aded_core::target::{serve_connection, RemoteTarget, ScriptedModel, TargetError, WireRequest};
use aded_core::{DraftTree, TargetModel, TokenId};

fn t(i: u32) -> TokenId {
    TokenId(i)
}

fn model() -> ScriptedModel {
    ScriptedModel::new()
        .rule(&[t(1)], &[(t(2), 0.5), (t(3), 0.3), (t(4), 0.2)])
        .emits(t(2), t(5))
        .with_default(&[(t(0), 1.0)])
}

/// Serves every connection with `handler`, which gets one parsed request
/// per line and returns the raw reply line (or `None` to hang up).
fn spawn<F>(handler: F) -> String
where
    F: Fn(WireRequest) -> Option<String> + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let mut writer = stream.try_clone().unwrap();
            for line in BufReader::new(stream).lines() {
                let Ok(line) = line else { break };
                let req: WireRequest = serde_json::from_str(&line).unwrap();
                match handler(req) {
                    Some(reply) => {
                        writer.write_all(reply.as_bytes()).unwrap();
                        writer.write_all(b"\n").unwrap();
                    }
                    None => break,
                }
            }
        }
    });
    addr
}

fn serve_model() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let m = model();
        for stream in listener.incoming().flatten() {
            let reader = BufReader::new(stream.try_clone().unwrap());
            let _ = serve_connection(reader, stream, &m);
        }
    });
    addr
}

fn tree() -> DraftTree {
    DraftTree::build(&[vec![t(2), t(5)], vec![t(3)]]).unwrap()
}

#[test]
fn remote_scores_match_the_local_model() {
    let remote = RemoteTarget::new(serve_model());
    let local = model().score_tree(&[t(0), t(1)], &tree()).unwrap();
    for _ in 0..3 {
        let got = remote.score_tree(&[t(0), t(1)], &tree()).unwrap();
        assert!(got.shaped);
        assert_eq!(got.head, local.head);
        assert_eq!(got.nodes, local.nodes);
    }
}

#[test]
fn top_m_truncates_and_renormalizes() {
    let remote = RemoteTarget::new(serve_model()).with_sampling(2, 1.0, 1.0);
    let d = remote.next_distribution(&[t(1)]).unwrap();
    assert_eq!(d.len(), 2);
    assert!((d.prob(t(2)) - 0.625).abs() < 1e-12);
    assert!((d.prob(t(3)) - 0.375).abs() < 1e-12);
}

#[test]
fn mismatched_id_is_reported() {
    let addr = spawn(|req| Some(format!(r#"{{"id":{},"head":[[1,1.0]],"dists":[]}}"#, req.id + 100)));
    let err = RemoteTarget::new(addr).next_distribution(&[t(1)]).unwrap_err();
    assert!(matches!(err, TargetError::IdMismatch { .. }), "{err}");
}

#[test]
fn wrong_node_count_is_reported() {
    let addr = spawn(|req| Some(format!(r#"{{"id":{},"head":[[1,1.0]],"dists":[]}}"#, req.id)));
    let err = RemoteTarget::new(addr).score_tree(&[t(1)], &tree()).unwrap_err();
    assert!(matches!(err, TargetError::NodeCountMismatch { expected: 3, got: 0 }), "{err}");
}

#[test]
fn garbage_and_bad_probabilities_are_malformed() {
    let addr = spawn(|_| Some("this is not json".into()));
    assert!(matches!(RemoteTarget::new(addr).next_distribution(&[t(1)]), Err(TargetError::Malformed(_))));
    let addr = spawn(|req| Some(format!(r#"{{"id":{},"head":[[1,-0.5]],"dists":[]}}"#, req.id)));
    assert!(matches!(RemoteTarget::new(addr).next_distribution(&[t(1)]), Err(TargetError::Malformed(_))));
}

#[test]
fn hang_up_is_a_transport_error_and_the_client_reconnects() {
    let addr = spawn(|req| (req.context != [7]).then(|| format!(r#"{{"id":{},"head":[[1,1.0]],"dists":[]}}"#, req.id)));
    let remote = RemoteTarget::new(addr);
    assert!(matches!(remote.next_distribution(&[t(7)]), Err(TargetError::Transport(_))));
    assert_eq!(remote.next_distribution(&[t(1)]).unwrap().argmax(), Some(t(1)));
}

#[test]
fn refused_connection_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let remote = RemoteTarget::new(format!("127.0.0.1:{port}"));
    assert!(matches!(remote.next_distribution(&[t(1)]), Err(TargetError::Transport(_))));
}

#[test]
fn server_reports_bad_trees() {
    let addr = serve_model();
    let mut stream = TcpStream::connect(addr).unwrap();
    stream
        .write_all(b"{\"id\":1,\"context\":[1],\"nodes\":[2,3],\"parents\":[1,-1],\"top_m\":4,\"temperature\":1.0,\"top_p\":1.0}\n")
        .unwrap();
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line).unwrap();
    assert!(line.contains("error"), "{line}");
}
