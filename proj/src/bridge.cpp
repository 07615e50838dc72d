#include "otbed/bridge.hpp"

#include <algorithm>

namespace otbed::bridge {

using modbus::ExceptionCode;
using modbus::FunctionCode;

Bridge::Bridge(BridgeConfig cfg) : cfg_(std::move(cfg)), store_(cfg_.table_size) {}

modbus::Pdu Bridge::counted(modbus::Pdu response) {
  if (std::holds_alternative<modbus::ExceptionResponse>(response)) ++stats_.exceptions;
  return response;
}

modbus::Pdu Bridge::route(fabric::Ipv4 peer, const modbus::Pdu& request) {
  ++stats_.requests;
  if (peer == cfg_.factory_ip) return counted(from_factory(request));
  if (cfg_.enforce_ownership && cfg_.owners.contains(peer) && !owns(peer, request)) {
    ++stats_.ownership_rejections;
    return counted(modbus::make_exception(modbus::function_byte(request), ExceptionCode::illegal_data_address));
  }
  return counted(modbus::apply_request(store_, request));
}

modbus::Pdu Bridge::from_factory(const modbus::Pdu& request) {
  const auto fc = modbus::function_byte(request);
  if (const auto* w = std::get_if<modbus::WriteMultipleCoils>(&request)) {
    if (std::size_t(w->address) + w->bits.size() > store_.discrete_input_count())
      return modbus::make_exception(fc, ExceptionCode::illegal_data_address);
    for (std::size_t i = 0; i < w->bits.size(); ++i) store_.set_discrete_input(w->address + i, w->bits[i]);
    ++stats_.sensor_updates;
    return modbus::WriteMultipleResponse{FunctionCode::write_multiple_coils, w->address,
                                         std::uint16_t(w->bits.size())};
  }
  if (const auto* w = std::get_if<modbus::WriteMultipleRegisters>(&request)) {
    if (std::size_t(w->address) + w->values.size() > store_.input_register_count())
      return modbus::make_exception(fc, ExceptionCode::illegal_data_address);
    for (std::size_t i = 0; i < w->values.size(); ++i) store_.set_input_register(w->address + i, w->values[i]);
    ++stats_.sensor_updates;
    return modbus::WriteMultipleResponse{FunctionCode::write_multiple_registers, w->address,
                                         std::uint16_t(w->values.size())};
  }
  if (std::holds_alternative<modbus::ReadRequest>(request)) return modbus::apply_request(store_, request);
  return modbus::make_exception(fc, ExceptionCode::illegal_function);
}

bool Bridge::owns(fabric::Ipv4 peer, const modbus::Pdu& request) const {
  factory::Table table;
  std::uint32_t start = 0, count = 0;
  if (const auto* w = std::get_if<modbus::WriteSingleCoil>(&request)) {
    table = factory::Table::coil, start = w->address, count = 1;
  } else if (const auto* w = std::get_if<modbus::WriteSingleRegister>(&request)) {
    table = factory::Table::holding_register, start = w->address, count = 1;
  } else if (const auto* w = std::get_if<modbus::WriteMultipleCoils>(&request)) {
    table = factory::Table::coil, start = w->address, count = std::uint32_t(w->bits.size());
  } else if (const auto* w = std::get_if<modbus::WriteMultipleRegisters>(&request)) {
    table = factory::Table::holding_register, start = w->address, count = std::uint32_t(w->values.size());
  } else {
    return true;  // reads are open to every PLC
  }
  const auto& blocks = cfg_.owners.at(peer);
  for (std::uint32_t a = start; a < start + count; ++a) {
    const bool ok = std::any_of(blocks.begin(), blocks.end(), [&](const plc::OutputBlock& b) {
      return b.table == table && a >= b.start && a < std::uint32_t(b.start) + b.count;
    });
    if (!ok) return false;
  }
  return true;
}

}  // namespace otbed::bridge
