//! Serving a stage model over TCP and calling it remotely.

pub mod protocol;

use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use protocol::{encode_request, encode_response, read_request, read_response, write_frame, FrameError, Request, Response, Status};

use crate::error::{Error, Result};
use crate::prob::ProbVector;
use crate::stage::StageModel;
use crate::tensor::Tensor;

/// A running server; dropping it without [`ServerHandle::shutdown`] leaves
/// the accept thread running.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the accept loop to exit.
    /// Connections already open finish on their own.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Binds `addr` and serves `model` with one thread per connection.
pub fn serve(model: Arc<dyn StageModel>, addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let accept = thread::Builder::new().name("stage-accept".into()).spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let model = Arc::clone(&model);
            let _ = thread::Builder::new().name("stage-conn".into()).spawn(move || handle(model.as_ref(), stream));
        }
    })?;
    Ok(ServerHandle { addr, stop, accept: Some(accept) })
}

fn answer(model: &dyn StageModel, input: &Tensor) -> Response {
    let want = model.input_dims();
    let ok_dims = match input.dims() {
        [c, h, w] => [*c, *h, *w] == want,
        [1, c, h, w] => [*c, *h, *w] == want,
        _ => false,
    };
    if !ok_dims {
        return Response::status(Status::BadShape);
    }
    let [c, h, w] = want;
    let input = match input.clone().reshape(&[1, c, h, w]) {
        Ok(t) => t,
        Err(_) => return Response::status(Status::BadShape),
    };
    match model.predict(&input) {
        Ok(p) => Response { status: Status::Ok, probs: p.into_inner() },
        Err(Error::Shape(_)) => Response::status(Status::BadShape),
        Err(_) => Response::status(Status::Unavailable),
    }
}

fn handle(model: &dyn StageModel, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let Ok(write_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    loop {
        let resp = match read_request(&mut reader) {
            Ok(Request::Ping) => Response::status(Status::Ok),
            Ok(Request::Infer(t)) => answer(model, &t),
            Err(FrameError::Malformed(_)) => {
                let _ = write_frame(&mut writer, &encode_response(&Response::status(Status::Malformed)));
                break;
            }
            Err(FrameError::Closed | FrameError::Io(_)) => break,
        };
        if write_frame(&mut writer, &encode_response(&resp)).is_err() {
            break;
        }
    }
    let _ = writer.get_ref().shutdown(Shutdown::Both);
}

/// A stage on another host. Every call opens a connection, sends one frame
/// and reads one reply; network failures and timeouts surface as
/// [`Error::ModelUnavailable`].
#[derive(Clone, Debug)]
pub struct RemoteStage {
    addr: SocketAddr,
    input_dims: [usize; 3],
    class_count: usize,
    timeout: Duration,
}

impl RemoteStage {
    pub fn new(addr: impl ToSocketAddrs, input_dims: [usize; 3], class_count: usize, timeout: Duration) -> Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| Error::invalid("address resolved to nothing"))?;
        if timeout.is_zero() {
            return Err(Error::invalid("timeout must be positive"));
        }
        Ok(RemoteStage { addr, input_dims, class_count, timeout })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn round_trip(&self, req: &Request) -> Result<Response> {
        let unavailable = |e: &dyn std::fmt::Display| Error::ModelUnavailable(format!("{}: {e}", self.addr));
        let bytes = encode_request(req).map_err(|e| Error::Protocol(e.to_string()))?;
        let stream = TcpStream::connect_timeout(&self.addr, self.timeout).map_err(|e| unavailable(&e))?;
        stream.set_read_timeout(Some(self.timeout)).map_err(|e| unavailable(&e))?;
        stream.set_write_timeout(Some(self.timeout)).map_err(|e| unavailable(&e))?;
        let _ = stream.set_nodelay(true);
        let mut writer = BufWriter::new(stream.try_clone().map_err(|e| unavailable(&e))?);
        write_frame(&mut writer, &bytes).map_err(|e| unavailable(&e))?;
        let resp = read_response(&mut BufReader::new(&stream)).map_err(|e| match e {
            FrameError::Malformed(m) => Error::Protocol(m),
            other => unavailable(&other),
        })?;
        let _ = stream.shutdown(Shutdown::Both);
        Ok(resp)
    }

    pub fn ping(&self) -> Result<()> {
        match self.round_trip(&Request::Ping)?.status {
            Status::Ok => Ok(()),
            s => Err(Error::Protocol(format!("ping answered with {s:?}"))),
        }
    }
}

impl StageModel for RemoteStage {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    fn predict(&self, input: &Tensor) -> Result<ProbVector> {
        let resp = self.round_trip(&Request::Infer(input.clone()))?;
        match resp.status {
            Status::Ok if resp.probs.len() == self.class_count => ProbVector::new(resp.probs),
            Status::Ok => Err(Error::Protocol(format!(
                "server returned {} classes, expected {}",
                resp.probs.len(),
                self.class_count
            ))),
            Status::BadShape => Err(Error::shape(format!("server rejected input dims {:?}", input.dims()))),
            Status::Unavailable => Err(Error::ModelUnavailable(format!("{}: server could not run the model", self.addr))),
            Status::Malformed => Err(Error::Protocol("server reported a malformed request".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::FnStage;
    use std::io::{Read, Write};

    fn echo_model() -> Arc<dyn StageModel> {
        Arc::new(FnStage::new(3, [1, 2, 2], |t: &Tensor| {
            let s: f32 = t.data().iter().map(|v| v.abs()).sum::<f32>() + 1.0;
            ProbVector::new(vec![1.0 / s, 0.0, 1.0 - 1.0 / s])
        }))
    }

    #[test]
    fn ping_infer_and_bad_shape() {
        let server = serve(echo_model(), "127.0.0.1:0").unwrap();
        let remote = RemoteStage::new(server.local_addr(), [1, 2, 2], 3, Duration::from_secs(5)).unwrap();
        remote.ping().unwrap();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        assert_eq!(remote.predict(&x).unwrap(), echo_model().predict(&x).unwrap());
        let bad = Tensor::zeros(&[1, 1, 3, 2]);
        assert!(matches!(remote.predict(&bad), Err(Error::Shape(_))));
        server.shutdown();
    }

    #[test]
    fn malformed_frame_gets_status_three_then_close() {
        let server = serve(echo_model(), "127.0.0.1:0").unwrap();
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        s.write_all(b"JUNKJUNK").unwrap();
        let mut buf = Vec::new();
        s.read_to_end(&mut buf).unwrap();
        assert_eq!(buf, b"SWPS\x01\x03\x00\x00\x00\x00");
        server.shutdown();
    }

    #[test]
    fn several_requests_on_one_connection() {
        let server = serve(echo_model(), "127.0.0.1:0").unwrap();
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        for _ in 0..3 {
            s.write_all(&encode_request(&Request::Ping).unwrap()).unwrap();
            let r = read_response(&mut s).unwrap();
            assert_eq!(r, Response::status(Status::Ok));
        }
        server.shutdown();
    }

    #[test]
    fn refused_connection_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let remote = RemoteStage::new(addr, [1, 2, 2], 3, Duration::from_millis(300)).unwrap();
        assert!(matches!(remote.predict(&Tensor::zeros(&[1, 1, 2, 2])), Err(Error::ModelUnavailable(_))));
    }
}
