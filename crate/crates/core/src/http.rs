//! Loopback HTTP front end for any [`OaiHandler`]: GET query strings and
//! form-encoded POST bodies.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::client::{OaiHandler, TransportErrorKind};

pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

fn parse_form(text: &str) -> Vec<(String, String)> {
    url::form_urlencoded::parse(text.as_bytes())
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect()
}

fn respond(handler: &dyn OaiHandler, mut req: tiny_http::Request) {
    let query = req.url().split_once('?').map(|(_, q)| q.to_string()).unwrap_or_default();
    let mut params = parse_form(&query);
    if *req.method() == tiny_http::Method::Post {
        let mut body = String::new();
        if req.as_reader().read_to_string(&mut body).is_err() {
            let _ = req.respond(tiny_http::Response::from_string("unreadable body").with_status_code(400));
            return;
        }
        params.extend(parse_form(&body));
    } else if *req.method() != tiny_http::Method::Get {
        let _ = req.respond(tiny_http::Response::from_string("GET or POST only").with_status_code(405));
        return;
    }
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"text/xml; charset=utf-8"[..])
        .expect("static header");
    let result = match handler.handle(&params) {
        Ok(r) => req.respond(
            tiny_http::Response::from_data(r.body)
                .with_status_code(r.status)
                .with_header(header),
        ),
        // a simulated disconnect drops the connection without an answer
        Err(e) if e.kind == TransportErrorKind::Disconnected => return,
        Err(e) => req.respond(tiny_http::Response::from_string(e.to_string()).with_status_code(500)),
    };
    if let Err(e) = result {
        log::debug!("client went away: {e}");
    }
}

impl HttpServer {
    /// Bind `addr` (port 0 picks a free one) and answer with `threads`
    /// workers.
    pub fn spawn(addr: &str, handler: Arc<dyn OaiHandler>, threads: usize) -> std::io::Result<HttpServer> {
        let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = server.clone();
                let handler = handler.clone();
                std::thread::spawn(move || {
                    for req in server.incoming_requests() {
                        respond(handler.as_ref(), req);
                    }
                })
            })
            .collect();
        Ok(HttpServer { server, addr, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL for requests, with `path` appended.
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    /// Block until the process is killed.
    pub fn wait(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }

    pub fn shutdown(self) {
        self.server.unblock();
        for _ in 1..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{HttpResponse, HttpTransport, Transport, TransportError};

    struct Echo;

    impl OaiHandler for Echo {
        fn handle(&self, params: &[(String, String)]) -> Result<HttpResponse, TransportError> {
            let text: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            Ok(HttpResponse::ok(text.join("&")))
        }
    }

    #[test]
    fn get_round_trip() {
        let server = HttpServer::spawn("127.0.0.1:0", Arc::new(Echo), 2).unwrap();
        let t = HttpTransport::new(std::time::Duration::from_secs(5), "test");
        let r = t
            .get(&server.url("/oai"), &[("verb".into(), "Identify".into()), ("x".into(), "a b&c".into())])
            .unwrap();
        assert_eq!(r.status, 200);
        assert_eq!(String::from_utf8(r.body).unwrap(), "verb=Identify&x=a b&c");
        server.shutdown();
    }
}
