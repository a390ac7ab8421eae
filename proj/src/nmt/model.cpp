#include "bcq/nmt/model.hpp"

namespace bcq::nmt {

template Model<float> make_model<float>(const ToyModelConfig&, std::uint64_t);
template Model<double> make_model<double>(const ToyModelConfig&, std::uint64_t);
template std::vector<ParamRef<float>> list_params<float>(Model<float>&);
template std::vector<ParamRef<double>> list_params<double>(Model<double>&);
template void zero_grads<float>(Model<float>&);
template void zero_grads<double>(Model<double>&);
template float sequence_loss<float>(Model<float>&, const TokenSeq&, const TokenSeq&, const TokenSeq&, bool);
template double sequence_loss<double>(Model<double>&, const TokenSeq&, const TokenSeq&, const TokenSeq&, bool);
template Eigen::Vector<float, Eigen::Dynamic> forward_next_token<float>(Model<float>&, const TokenSeq&,
                                                                        const TokenSeq&);
template Eigen::Vector<double, Eigen::Dynamic> forward_next_token<double>(Model<double>&, const TokenSeq&,
                                                                          const TokenSeq&);

}  // namespace bcq::nmt
