//! Minimal runtime binding to the NVIDIA management library.
//!
//! The library is opened with `dlopen` so the binary builds and runs on machines without a GPU
//! driver; only `gpu:<index>` power sources need it.

use std::ffi::{c_char, c_int, c_uint, c_void, CStr, CString};
use std::sync::{Arc, OnceLock};

type NvmlDevice = *mut c_void;

struct Api {
    _lib: *mut c_void,
    device_by_index: unsafe extern "C" fn(c_uint, *mut NvmlDevice) -> c_int,
    power_usage: unsafe extern "C" fn(NvmlDevice, *mut c_uint) -> c_int,
    device_name: unsafe extern "C" fn(NvmlDevice, *mut c_char, c_uint) -> c_int,
    driver_version: unsafe extern "C" fn(*mut c_char, c_uint) -> c_int,
}

// The library handle and function pointers are process-global and NVML is thread-safe.
unsafe impl Send for Api {}
unsafe impl Sync for Api {}

static API: OnceLock<Result<Arc<Api>, String>> = OnceLock::new();

unsafe fn sym<T: Copy>(lib: *mut c_void, name: &str) -> Result<T, String> {
    let cname = CString::new(name).unwrap();
    let p = libc::dlsym(lib, cname.as_ptr());
    if p.is_null() {
        return Err(format!("symbol {name} missing from NVML"));
    }
    Ok(std::mem::transmute_copy(&p))
}

fn load() -> Result<Arc<Api>, String> {
    unsafe {
        let mut lib = std::ptr::null_mut();
        for name in ["libnvidia-ml.so.1", "libnvidia-ml.so"] {
            let cname = CString::new(name).unwrap();
            lib = libc::dlopen(cname.as_ptr(), libc::RTLD_NOW);
            if !lib.is_null() {
                break;
            }
        }
        if lib.is_null() {
            return Err("NVML library (libnvidia-ml.so.1) not found".into());
        }
        let init: unsafe extern "C" fn() -> c_int = sym(lib, "nvmlInit_v2")?;
        let rc = init();
        if rc != 0 {
            return Err(format!("nvmlInit_v2 failed with code {rc}"));
        }
        Ok(Arc::new(Api {
            _lib: lib,
            device_by_index: sym(lib, "nvmlDeviceGetHandleByIndex_v2")?,
            power_usage: sym(lib, "nvmlDeviceGetPowerUsage")?,
            device_name: sym(lib, "nvmlDeviceGetName")?,
            driver_version: sym(lib, "nvmlSystemGetDriverVersion")?,
        }))
    }
}

fn api() -> Result<Arc<Api>, String> {
    API.get_or_init(load).clone()
}

pub struct NvmlDeviceHandle {
    api: Arc<Api>,
    device: NvmlDevice,
}

unsafe impl Send for NvmlDeviceHandle {}

impl NvmlDeviceHandle {
    pub fn open(index: u32) -> Result<Self, String> {
        let api = api()?;
        let mut device = std::ptr::null_mut();
        let rc = unsafe { (api.device_by_index)(index, &mut device) };
        if rc != 0 {
            return Err(format!("no NVML device at index {index} (code {rc})"));
        }
        Ok(Self { api, device })
    }

    /// Board power draw in watts.
    pub fn power_watts(&self) -> Result<f64, String> {
        let mut mw: c_uint = 0;
        let rc = unsafe { (self.api.power_usage)(self.device, &mut mw) };
        if rc != 0 {
            return Err(format!("nvmlDeviceGetPowerUsage failed with code {rc}"));
        }
        Ok(mw as f64 / 1000.0)
    }

    pub fn name(&self) -> Option<String> {
        let mut buf = [0 as c_char; 96];
        let rc = unsafe { (self.api.device_name)(self.device, buf.as_mut_ptr(), buf.len() as c_uint) };
        (rc == 0).then(|| unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned())
    }
}

pub fn driver_version() -> Option<String> {
    let api = api().ok()?;
    let mut buf = [0 as c_char; 96];
    let rc = unsafe { (api.driver_version)(buf.as_mut_ptr(), buf.len() as c_uint) };
    (rc == 0).then(|| unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned())
}
